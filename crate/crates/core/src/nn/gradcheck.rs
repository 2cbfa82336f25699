//! Central finite-difference gradient checking.
//!
//! Relative error per coordinate is `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
//! The floor keeps coordinates whose true gradient is (nearly) zero from being
//! judged on cancellation noise; with `h = 1e-5` and O(1) function values that
//! noise is around 1e-10 absolute.

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use super::Tensor;
use crate::error::Result;

pub const FD_STEP: f64 = 1e-5;
pub const REL_ERR_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct GradMismatch {
    /// Parameter name, or "input" for plain input checks.
    pub source: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub tol: f64,
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub failures: Vec<GradMismatch>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    fn record(&mut self, source: &str, index: usize, analytic: f64, numeric: f64) {
        let abs = (analytic - numeric).abs();
        let rel = abs / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
        self.checked += 1;
        self.max_abs_err = self.max_abs_err.max(abs);
        self.max_rel_err = self.max_rel_err.max(rel);
        if !(rel <= self.tol) {
            self.failures.push(GradMismatch {
                source: source.to_string(),
                index,
                analytic,
                numeric,
                rel_err: rel,
            });
        }
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
        self.max_abs_err = self.max_abs_err.max(other.max_abs_err);
        self.failures.extend(other.failures);
    }
}

/// Compares a caller-supplied analytic gradient against central differences of `f`.
pub fn check_gradient(
    mut f: impl FnMut(&Tensor) -> f64,
    analytic: &Tensor,
    x: &Tensor,
    tol: f64,
) -> GradCheckReport {
    let mut report = GradCheckReport {
        tol,
        ..Default::default()
    };
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + FD_STEP;
        let up = f(&probe);
        probe.data_mut()[i] = orig - FD_STEP;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * FD_STEP);
        report.record("input", i, analytic.data()[i], numeric);
    }
    report
}

/// Checks the tape gradient of a scalar graph function with respect to its input.
pub fn grad_check<F>(store: &ParamStore, f: F, x: &Tensor, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let eval = |t: &Tensor| -> Result<f64> {
        let mut g = Graph::new(store);
        let xv = g.input(t.clone());
        let out = f(&mut g, xv)?;
        Ok(g.value(out).get(0, 0))
    };
    let mut g = Graph::new(store);
    let xv = g.input(x.clone());
    let out = f(&mut g, xv)?;
    let grads = g.backward(out)?;
    let analytic = grads
        .wrt(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.rows(), x.cols()));
    let mut failed = None;
    let report = check_gradient(
        |t| match eval(t) {
            Ok(v) => v,
            Err(e) => {
                failed.get_or_insert(e);
                f64::NAN
            }
        },
        &analytic,
        x,
        tol,
    );
    match failed {
        Some(e) => Err(e),
        None => Ok(report),
    }
}

/// Checks parameter gradients of a scalar graph function. At most
/// `max_coords` evenly spaced coordinates are probed per parameter
/// (`usize::MAX` probes all of them).
pub fn grad_check_params<F>(
    store: &ParamStore,
    f: F,
    params: &[ParamId],
    max_coords: usize,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let mut g = Graph::new(store);
    let out = f(&mut g)?;
    let grads = g.backward(out)?;

    let mut report = GradCheckReport {
        tol,
        ..Default::default()
    };
    let mut probe = store.clone();
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(s);
        let out = f(&mut g)?;
        Ok(g.value(out).get(0, 0))
    };
    for &id in params {
        let n = store.value(id).len();
        let zero = Tensor::zeros(store.value(id).rows(), store.value(id).cols());
        let analytic = grads.param(id).unwrap_or(&zero);
        let stride = if n <= max_coords { 1 } else { n.div_ceil(max_coords) };
        for i in (0..n).step_by(stride) {
            let orig = probe.value(id).data()[i];
            probe.value_mut(id).data_mut()[i] = orig + FD_STEP;
            let up = eval(&probe)?;
            probe.value_mut(id).data_mut()[i] = orig - FD_STEP;
            let down = eval(&probe)?;
            probe.value_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            report.record(&store.get(id).name, i, analytic.data()[i], numeric);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_matches_to_1e8() {
        let store = ParamStore::new();
        let x = Tensor::new(1, 4, vec![0.3, -1.2, 2.5, 0.0]).unwrap();
        let report = grad_check(
            &store,
            |g, x| {
                let sq = g.mul(x, x)?;
                Ok(g.sum(sq))
            },
            &x,
            1e-8,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
        assert_eq!(report.checked, 4);
    }

    #[test]
    fn corrupted_gradient_is_flagged() {
        let x = Tensor::new(1, 3, vec![0.5, 1.0, -2.0]).unwrap();
        // True gradient of sum(x^3) is 3x^2; supply 3x^2 * 1.01 instead.
        let wrong = x.map(|v| 3.0 * v * v * 1.01);
        let report = check_gradient(|t| t.data().iter().map(|v| v * v * v).sum(), &wrong, &x, 1e-6);
        assert!(!report.passed());
        assert_eq!(report.failures.len(), 3);
    }
}

/// Runs every tape op through input and parameter gradient checks on small
/// random shapes drawn from `seed`. Each scalar is a random projection of the
/// op output so gradients are O(1).
pub fn check_all_ops(seed: u64, tol: f64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let rows = rng.random_range(2..5usize);
    let cols = 2 * rng.random_range(1..4usize);
    let mut store = ParamStore::new();
    let rn = |r: usize, c: usize, rng: &mut rand_chacha::ChaCha8Rng| Tensor::randn(r, c, 1.0, rng);
    let w = store.add("w", rn(cols, cols + 1, &mut rng));
    let b = store.add("b", rn(1, cols + 1, &mut rng));
    let other = store.add("other", rn(rows, cols, &mut rng));
    let wide = store.add("wide", rn(cols, 3, &mut rng));
    let gamma = store.add("gamma", rn(1, cols, &mut rng));
    let beta = store.add("beta", rn(1, cols, &mut rng));
    let keys = store.add("keys", rn(rows + 1, cols, &mut rng));
    let vals = store.add("vals", rn(rows + 1, cols, &mut rng));
    let conv_w = store.add("conv_w", rn(3 * cols, 3, &mut rng));
    let conv_b = store.add("conv_b", rn(1, 3, &mut rng));
    let table = store.add("table", rn(5, cols, &mut rng));
    let row = store.add("row", rn(1, cols, &mut rng));
    let x = rn(rows, cols, &mut rng);
    let target = rn(rows, cols, &mut rng);
    let proj_seed: u64 = rng.random();
    let ids: Vec<usize> = (0..rows + 2).map(|_| rng.random_range(0..5)).collect();
    let heads = if cols % 2 == 0 && cols > 2 { 2 } else { 1 };

    // Projects any output to a scalar with fixed random weights.
    let project = move |g: &mut Graph, v: Var| -> Result<Var> {
        let [r, c] = g.shape(v);
        let mut prng = rand_chacha::ChaCha8Rng::seed_from_u64(proj_seed ^ ((r * 131 + c) as u64));
        let weights = Tensor::randn(r, c, 1.0, &mut prng);
        g.weighted_sum(v, weights)
    };

    type OpFn<'a> = Box<dyn Fn(&mut Graph, Var) -> Result<Var> + 'a>;
    let cases: Vec<(&'static str, Vec<ParamId>, OpFn)> = vec![
        ("affine", vec![w, b], Box::new(|g, x| {
            let (pw, pb) = (g.param(w), g.param(b));
            g.affine(x, pw, Some(pb))
        })),
        ("matmul", vec![wide], Box::new(|g, x| {
            let p = g.param(wide);
            g.matmul(x, p)
        })),
        ("matmul_nt", vec![keys], Box::new(|g, x| {
            let p = g.param(keys);
            g.matmul_nt(x, p)
        })),
        ("add", vec![other], Box::new(|g, x| {
            let p = g.param(other);
            g.add(x, p)
        })),
        ("sub", vec![other], Box::new(|g, x| {
            let p = g.param(other);
            g.sub(p, x)
        })),
        ("mul", vec![other], Box::new(|g, x| {
            let p = g.param(other);
            g.mul(x, p)
        })),
        ("add_row", vec![row], Box::new(|g, x| {
            let p = g.param(row);
            g.add_row(x, p)
        })),
        ("scale", vec![], Box::new(|g, x| Ok(g.scale(x, -1.7)))),
        ("gelu", vec![], Box::new(|g, x| Ok(g.gelu(x)))),
        ("layer_norm", vec![gamma, beta], Box::new(|g, x| {
            let (pg, pb) = (g.param(gamma), g.param(beta));
            g.layer_norm(x, pg, pb)
        })),
        ("softmax", vec![], Box::new(|g, x| Ok(g.softmax(x)))),
        ("attention", vec![keys, vals], Box::new(move |g, x| {
            let (k, v) = (g.param(keys), g.param(vals));
            g.attention(x, k, v, heads)
        })),
        ("self_attention", vec![], Box::new(move |g, x| g.attention(x, x, x, heads))),
        ("conv1d", vec![conv_w, conv_b], Box::new(|g, x| {
            let (pw, pb) = (g.param(conv_w), g.param(conv_b));
            g.conv1d(x, pw, pb)
        })),
        ("embedding", vec![table], Box::new(|g, x| {
            let t = g.param(table);
            let e = g.embedding(t, &ids)?;
            // Tie the input in so the input check is non-trivial.
            let head = g.slice_rows(e, 0, g.shape(x)[0])?;
            g.mul(head, x)
        })),
        ("concat_cols", vec![other], Box::new(|g, x| {
            let p = g.param(other);
            g.concat_cols(&[x, p, x])
        })),
        ("concat_rows", vec![other], Box::new(|g, x| {
            let p = g.param(other);
            g.concat_rows(&[p, x])
        })),
        ("slice_rows", vec![], Box::new(|g, x| {
            let n = g.shape(x)[0];
            g.slice_rows(x, 1, n - 1)
        })),
        ("positional_encoding", vec![], Box::new(|g, x| {
            let p = g.positional(x);
            g.mul(p, p)
        })),
        ("sum", vec![], Box::new(|g, x| {
            let sq = g.mul(x, x)?;
            let s = g.sum(sq);
            g.mul(s, s)
        })),
        ("mse", vec![], Box::new(|g, x| {
            let m = g.mse(x, target.clone())?;
            g.mul(m, m)
        })),
    ];

    let mut out = Vec::with_capacity(cases.len());
    for (name, params, f) in &cases {
        let scalar = |g: &mut Graph, x: Var| -> Result<Var> {
            let y = f(g, x)?;
            if g.shape(y) == [1, 1] {
                Ok(y)
            } else {
                project(g, y)
            }
        };
        let mut report = grad_check(&store, scalar, &x, tol)?;
        if !params.is_empty() {
            let xc = x.clone();
            let by_param = grad_check_params(
                &store,
                |g| {
                    let xv = g.constant(xc.clone());
                    scalar(g, xv)
                },
                params,
                usize::MAX,
                tol,
            )?;
            report.merge(by_param);
        }
        out.push((*name, report));
    }
    Ok(out)
}
