//! Tape-based reverse-mode differentiation over matrices.
//!
//! A [`Graph`] is built fresh for every forward pass. Each op appends a node
//! holding its output value plus whatever it needs for the backward pass;
//! [`Graph::backward`] walks the tape in reverse and accumulates exact
//! gradients into every node that feeds the loss.
//!
//! Parameters are borrowed from a [`ParamStore`] and never copied into the
//! tape, so many graphs may read the same store concurrently.

use super::params::{ParamId, ParamStore};
use super::tensor::{gemm, Tensor, Trans};
use crate::error::{Error, Result};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;
pub const LAYER_NORM_EPS: f64 = 1e-5;

enum Op {
    Constant,
    Input,
    Param(ParamId),
    Affine { x: Var, w: Var, b: Option<Var> },
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { x: Var, row: Var },
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor, rstd: Vec<f64> },
    Softmax(Var),
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<Tensor> },
    Conv1d { x: Var, w: Var, b: Var },
    Embedding { table: Var, ids: Vec<usize> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    Positional(Var),
    Sum(Var),
    WeightedSum { x: Var, weights: Tensor },
    Mse { pred: Var, target: Tensor },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::Affine { .. } => "affine",
            Op::MatMul(..) => "matmul",
            Op::MatMulNt(..) => "matmul_nt",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow { .. } => "add_row",
            Op::Scale(..) => "scale",
            Op::Gelu(_) => "gelu",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Softmax(_) => "softmax",
            Op::Attention { .. } => "attention",
            Op::Conv1d { .. } => "conv1d",
            Op::Embedding { .. } => "embedding",
            Op::ConcatCols(_) => "concat_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::SliceRows { .. } => "slice_rows",
            Op::Positional(_) => "positional_encoding",
            Op::Sum(_) => "sum",
            Op::WeightedSum { .. } => "weighted_sum",
            Op::Mse { .. } => "mse",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

pub struct Graph<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

/// Result of [`Graph::backward`]: gradients for every parameter used and every
/// tape node.
pub struct Gradients {
    params: Vec<(ParamId, Tensor)>,
    nodes: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(id, g)| (*id, g))
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, g)| g)
    }

    /// Gradient of the loss with respect to any node, `None` if it does not
    /// influence the loss.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }
}

/// `positional[p, 2i] = sin(p / 10000^(2i/C))`, `positional[p, 2i+1] = cos(..)`.
pub fn sinusoidal_table(rows: usize, cols: usize) -> Tensor {
    Tensor::from_fn(rows, cols, |p, c| {
        let i = (c / 2) as f64;
        let freq = 1.0 / 10000f64.powf(2.0 * i / cols as f64);
        let a = p as f64 * freq;
        if c % 2 == 0 {
            a.sin()
        } else {
            a.cos()
        }
    })
}

fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn softmax_rows_in_place(t: &mut Tensor) {
    let cols = t.cols();
    for r in 0..t.rows() {
        let row = t.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        let inv = 1.0 / sum;
        row.iter_mut().for_each(|x| *x *= inv);
        debug_assert_eq!(row.len(), cols);
    }
}

/// Row-wise softmax outside any graph.
pub fn softmax_rows(t: &Tensor) -> Tensor {
    let mut out = t.clone();
    softmax_rows_in_place(&mut out);
    out
}

fn softmax_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(y.rows(), y.cols());
    for r in 0..y.rows() {
        let yr = y.row(r);
        let dyr = dy.row(r);
        let dot: f64 = yr.iter().zip(dyr).map(|(a, b)| a * b).sum();
        for (o, (a, b)) in dx.row_mut(r).iter_mut().zip(yr.iter().zip(dyr)) {
            *o = a * (b - dot);
        }
    }
    dx
}

fn im2col3(x: &Tensor) -> Tensor {
    let (t, c) = (x.rows(), x.cols());
    let mut col = Tensor::zeros(t, 3 * c);
    for r in 0..t {
        for k in 0..3 {
            let src = r as isize + k as isize - 1;
            if src < 0 || src >= t as isize {
                continue;
            }
            col.row_mut(r)[k * c..(k + 1) * c].copy_from_slice(x.row(src as usize));
        }
    }
    col
}

fn write_cols(dst: &mut Tensor, start: usize, src: &Tensor) {
    let w = src.cols();
    for r in 0..dst.rows() {
        dst.row_mut(r)[start..start + w].copy_from_slice(src.row(r));
    }
}

fn add_cols(dst: &mut Tensor, start: usize, src: &Tensor) {
    let w = src.cols();
    for r in 0..dst.rows() {
        for (d, s) in dst.row_mut(r)[start..start + w].iter_mut().zip(src.row(r)) {
            *d += s;
        }
    }
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::ShapeMismatch { op, detail }
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match self.nodes[v.0].op {
            Op::Param(id) => self.store.value(id),
            _ => &self.nodes[v.0].value,
        }
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.value(v).shape()
    }

    /// Leaf that does not receive a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant)
    }

    /// Leaf whose gradient is kept; query it with [`Gradients::wrt`].
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let v = self.push(Tensor::zeros(0, 0), Op::Param(id));
        self.param_vars[id.0] = Some(v);
        v
    }

    /// `x * w + b` with `w: in x out`, `b: 1 x out`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if xv.cols() != wv.rows() {
            return Err(shape_err(
                "affine",
                format!("input {:?} vs weight {:?}", xv.shape(), wv.shape()),
            ));
        }
        let mut out = xv.matmul(wv);
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.shape() != [1, out.cols()] {
                return Err(shape_err("affine", format!("bias {:?}", bv.shape())));
            }
            for r in 0..out.rows() {
                for (o, bb) in out.row_mut(r).iter_mut().zip(bv.data()) {
                    *o += bb;
                }
            }
        }
        Ok(self.push(out, Op::Affine { x, w, b }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.rows() {
            return Err(shape_err(
                "matmul",
                format!("{:?} x {:?}", av.shape(), bv.shape()),
            ));
        }
        let out = av.matmul(bv);
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `a * b^T`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.cols() {
            return Err(shape_err(
                "matmul_nt",
                format!("{:?} x {:?}^T", av.shape(), bv.shape()),
            ));
        }
        let out = av.matmul_nt(bv);
        Ok(self.push(out, Op::MatMulNt(a, b)))
    }

    fn check_same(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("add", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("sub", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("mul", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// Broadcast-adds a `1 x cols` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (xv, rv) = (self.value(x), self.value(row));
        if rv.shape() != [1, xv.cols()] {
            return Err(shape_err(
                "add_row",
                format!("{:?} + {:?}", xv.shape(), rv.shape()),
            ));
        }
        let mut out = xv.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(rv.data()) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddRow { x, row }))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.push(out, Op::Scale(x, s))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        self.push(out, Op::Gelu(x))
    }

    /// Per-row normalization with learned `1 x cols` gain and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.value(x);
        let cols = xv.cols();
        if self.shape(gamma) != [1, cols] || self.shape(beta) != [1, cols] {
            return Err(shape_err("layer_norm", "gain/shift width".into()));
        }
        let mut xhat = Tensor::zeros(xv.rows(), cols);
        let mut rstd = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (o, v) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * s;
            }
            rstd.push(s);
        }
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let mut out = xhat.clone();
        for r in 0..out.rows() {
            for ((o, g), b) in out.row_mut(r).iter_mut().zip(gv.data()).zip(bv.data()) {
                *o = *o * g + b;
            }
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: Var) -> Var {
        let out = softmax_rows(self.value(x));
        self.push(out, Op::Softmax(x))
    }

    /// Multi-head scaled dot-product attention. `q: n x C`, `k, v: m x C`;
    /// head `h` uses columns `h*C/heads .. (h+1)*C/heads` and scores are scaled
    /// by `1/sqrt(C/heads)`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let c = qv.cols();
        if heads == 0
            || c % heads != 0
            || kv.cols() != c
            || vv.cols() != c
            || kv.rows() != vv.rows()
        {
            return Err(shape_err(
                "attention",
                format!(
                    "q {:?}, k {:?}, v {:?}, heads {heads}",
                    qv.shape(),
                    kv.shape(),
                    vv.shape()
                ),
            ));
        }
        let dh = c / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Tensor::zeros(qv.rows(), c);
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (qh, kh, vh) = (
                qv.slice_cols(h * dh, dh),
                kv.slice_cols(h * dh, dh),
                vv.slice_cols(h * dh, dh),
            );
            let mut s = Tensor::zeros(qh.rows(), kh.rows());
            gemm(scale, &qh, Trans::No, &kh, Trans::Yes, 0.0, &mut s);
            softmax_rows_in_place(&mut s);
            let oh = s.matmul(&vh);
            write_cols(&mut out, h * dh, &oh);
            probs.push(s);
        }
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
        ))
    }

    /// Kernel-3, stride-1, zero-padded convolution along rows (time).
    /// `w: 3*in x out` stacks the taps for offsets -1, 0, +1.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if wv.rows() != 3 * xv.cols() || bv.shape() != [1, wv.cols()] {
            return Err(shape_err(
                "conv1d",
                format!(
                    "input {:?}, weight {:?}, bias {:?}",
                    xv.shape(),
                    wv.shape(),
                    bv.shape()
                ),
            ));
        }
        let mut out = im2col3(xv).matmul(wv);
        for r in 0..out.rows() {
            for (o, bb) in out.row_mut(r).iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
        Ok(self.push(out, Op::Conv1d { x, w, b }))
    }

    /// Gathers rows of `table` by id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= tv.rows()) {
            return Err(shape_err(
                "embedding",
                format!("id {bad} outside vocabulary of {}", tv.rows()),
            ));
        }
        let mut out = Tensor::zeros(ids.len(), tv.cols());
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(tv.row(id));
        }
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_cols(&vals)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_rows(&vals)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if start + len > xv.rows() {
            return Err(shape_err(
                "slice_rows",
                format!("{start}+{len} > {}", xv.rows()),
            ));
        }
        let out = xv.slice_rows(start, len);
        Ok(self.push(out, Op::SliceRows { x, start }))
    }

    /// Adds the fixed sinusoidal position table.
    pub fn positional(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = sinusoidal_table(xv.rows(), xv.cols());
        out.add_assign(xv);
        self.push(out, Op::Positional(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::filled(1, 1, s), Op::Sum(x))
    }

    /// `sum(x .* weights)`; a random-projection scalar for gradient checks.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != weights.shape() {
            return Err(shape_err(
                "weighted_sum",
                format!("{:?} vs {:?}", xv.shape(), weights.shape()),
            ));
        }
        let s: f64 = xv.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum();
        Ok(self.push(Tensor::filled(1, 1, s), Op::WeightedSum { x, weights }))
    }

    /// Mean squared error over all entries.
    pub fn mse(&mut self, pred: Var, target: Tensor) -> Result<Var> {
        let pv = self.value(pred);
        if pv.shape() != target.shape() {
            return Err(shape_err(
                "mse",
                format!("{:?} vs {:?}", pv.shape(), target.shape()),
            ));
        }
        let n = pv.len().max(1) as f64;
        let s: f64 = pv
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        Ok(self.push(Tensor::filled(1, 1, s / n), Op::Mse { pred, target }))
    }

    /// Reverse pass from a `1 x 1` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.shape(loss) != [1, 1] {
            return Err(shape_err(
                "backward",
                format!("loss must be 1x1, got {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(1, 1, 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let name = node.op.name();
            let mut acc = |v: Var, t: Tensor| -> Result<()> {
                if !t.is_finite() {
                    return Err(Error::NonFiniteGradient { op: name });
                }
                match &mut grads[v.0] {
                    Some(existing) => {
                        existing.add_assign(&t);
                        if !existing.is_finite() {
                            return Err(Error::NonFiniteGradient { op: name });
                        }
                    }
                    slot => *slot = Some(t),
                }
                Ok(())
            };
            match &node.op {
                Op::Constant | Op::Input | Op::Param(_) => {}
                Op::Affine { x, w, b } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    acc(*x, g.matmul_nt(wv))?;
                    acc(*w, xv.matmul_tn(&g))?;
                    if let Some(b) = b {
                        acc(*b, column_sums(&g))?;
                    }
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    acc(*a, g.matmul_nt(bv))?;
                    acc(*b, av.matmul_tn(&g))?;
                }
                Op::MatMulNt(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    acc(*a, g.matmul(bv))?;
                    acc(*b, g.matmul_tn(av))?;
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone())?;
                    acc(*b, g.clone())?;
                }
                Op::Sub(a, b) => {
                    acc(*a, g.clone())?;
                    acc(*b, g.map(|v| -v))?;
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    acc(*a, g.zip_map(bv, |x, y| x * y))?;
                    acc(*b, g.zip_map(av, |x, y| x * y))?;
                }
                Op::AddRow { x, row } => {
                    acc(*row, column_sums(&g))?;
                    acc(*x, g.clone())?;
                }
                Op::Scale(x, s) => acc(*x, g.map(|v| v * s))?,
                Op::Gelu(x) => {
                    let dx = g.zip_map(self.value(*x), |d, xv| d * gelu_grad(xv));
                    acc(*x, dx)?;
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let gv = self.value(*gamma);
                    let cols = xhat.cols();
                    let n = cols as f64;
                    let mut dx = Tensor::zeros(xhat.rows(), cols);
                    let mut dgamma = Tensor::zeros(1, cols);
                    for r in 0..xhat.rows() {
                        let (gr, xr) = (g.row(r), xhat.row(r));
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for c in 0..cols {
                            let d = gr[c] * gv.get(0, c);
                            sum_d += d;
                            sum_dx += d * xr[c];
                            dgamma.data_mut()[c] += gr[c] * xr[c];
                        }
                        let s = rstd[r] / n;
                        for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                            let d = gr[c] * gv.get(0, c);
                            *o = s * (n * d - sum_d - xr[c] * sum_dx);
                        }
                    }
                    acc(*gamma, dgamma)?;
                    acc(*beta, column_sums(&g))?;
                    acc(*x, dx)?;
                }
                Op::Softmax(x) => acc(*x, softmax_backward(&node.value, &g))?,
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    probs,
                } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let c = qv.cols();
                    let dh = c / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut dq = Tensor::zeros(qv.rows(), c);
                    let mut dk = Tensor::zeros(kv.rows(), c);
                    let mut dv = Tensor::zeros(vv.rows(), c);
                    for (h, p) in probs.iter().enumerate() {
                        let (qh, kh, vh) = (
                            qv.slice_cols(h * dh, dh),
                            kv.slice_cols(h * dh, dh),
                            vv.slice_cols(h * dh, dh),
                        );
                        let doh = g.slice_cols(h * dh, dh);
                        let dp = doh.matmul_nt(&vh);
                        add_cols(&mut dv, h * dh, &p.matmul_tn(&doh));
                        let ds = softmax_backward(p, &dp);
                        let mut dqh = Tensor::zeros(qh.rows(), dh);
                        gemm(scale, &ds, Trans::No, &kh, Trans::No, 0.0, &mut dqh);
                        let mut dkh = Tensor::zeros(kh.rows(), dh);
                        gemm(scale, &ds, Trans::Yes, &qh, Trans::No, 0.0, &mut dkh);
                        add_cols(&mut dq, h * dh, &dqh);
                        add_cols(&mut dk, h * dh, &dkh);
                    }
                    acc(*q, dq)?;
                    acc(*k, dk)?;
                    acc(*v, dv)?;
                }
                Op::Conv1d { x, w, b } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let col = im2col3(xv);
                    acc(*w, col.matmul_tn(&g))?;
                    acc(*b, column_sums(&g))?;
                    let dcol = g.matmul_nt(wv);
                    let (t, cin) = (xv.rows(), xv.cols());
                    let mut dx = Tensor::zeros(t, cin);
                    for r in 0..t {
                        for k in 0..3 {
                            let dst = r as isize + k as isize - 1;
                            if dst < 0 || dst >= t as isize {
                                continue;
                            }
                            let src = &dcol.row(r)[k * cin..(k + 1) * cin];
                            for (o, s) in dx.row_mut(dst as usize).iter_mut().zip(src) {
                                *o += s;
                            }
                        }
                    }
                    acc(*x, dx)?;
                }
                Op::Embedding { table, ids } => {
                    let tv = self.value(*table);
                    let mut dt = Tensor::zeros(tv.rows(), tv.cols());
                    for (r, &id) in ids.iter().enumerate() {
                        for (o, s) in dt.row_mut(id).iter_mut().zip(g.row(r)) {
                            *o += s;
                        }
                    }
                    acc(*table, dt)?;
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let w = self.shape(p)[1];
                        acc(p, g.slice_cols(start, w))?;
                        start += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let h = self.shape(p)[0];
                        acc(p, g.slice_rows(start, h))?;
                        start += h;
                    }
                }
                Op::SliceRows { x, start } => {
                    let [rows, cols] = self.shape(*x);
                    let mut dx = Tensor::zeros(rows, cols);
                    for r in 0..g.rows() {
                        dx.row_mut(start + r).copy_from_slice(g.row(r));
                    }
                    acc(*x, dx)?;
                }
                Op::Positional(x) => acc(*x, g.clone())?,
                Op::Sum(x) => {
                    let [r, c] = self.shape(*x);
                    acc(*x, Tensor::filled(r, c, g.get(0, 0)))?;
                }
                Op::WeightedSum { x, weights } => {
                    let s = g.get(0, 0);
                    acc(*x, weights.map(|w| w * s))?;
                }
                Op::Mse { pred, target } => {
                    let pv = self.value(*pred);
                    let k = 2.0 * g.get(0, 0) / pv.len().max(1) as f64;
                    acc(*pred, pv.zip_map(target, |a, b| k * (a - b)))?;
                }
            }
            grads[i] = Some(g);
        }

        let params = self
            .param_vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                grads[v.0].clone().map(|g| (ParamId(i), g))
            })
            .collect();
        Ok(Gradients {
            params,
            nodes: grads,
        })
    }
}

fn column_sums(g: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (o, v) in out.data_mut().iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    out
}
