use super::gradcheck::{check_all_ops, grad_check};
use super::*;

#[test]
fn every_op_matches_finite_differences_over_five_seeds() {
    for seed in 0..5 {
        for (name, report) in check_all_ops(seed, 1e-6).unwrap() {
            assert!(
                report.passed(),
                "op {name} seed {seed}: max rel err {:.3e}, failures {:?}",
                report.max_rel_err,
                &report.failures[..report.failures.len().min(3)]
            );
            assert!(report.checked > 0);
        }
    }
}

#[test]
fn affine_with_identity_weight_is_identity() {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::identity(3));
    let b = store.add("b", Tensor::zeros(1, 3));
    let x = Tensor::from_fn(4, 3, |r, c| r as f64 - 0.5 * c as f64);
    let mut g = Graph::new(&store);
    let xv = g.constant(x.clone());
    let (wv, bv) = (g.param(w), g.param(b));
    let y = g.affine(xv, wv, Some(bv)).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn gradient_of_softmax_sum_vanishes() {
    let store = ParamStore::new();
    let x = Tensor::new(2, 3, vec![0.1, 2.0, -1.0, 5.0, 5.0, -3.0]).unwrap();
    let mut g = Graph::new(&store);
    let xv = g.input(x);
    let s = g.softmax(xv);
    let total = g.sum(s);
    let grads = g.backward(total).unwrap();
    assert!(grads.wrt(xv).unwrap().data().iter().all(|v| v.abs() < 1e-15));
}

#[test]
fn single_head_identity_attention_is_softmax_mixing() {
    // softmax(A H^T / sqrt(C)) H, computed by hand.
    let a = Tensor::from_fn(3, 4, |r, c| ((r * 4 + c) as f64 * 0.37).sin());
    let h = Tensor::from_fn(2, 4, |r, c| ((r * 4 + c) as f64 * 0.71).cos());
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let (av, hv) = (g.constant(a.clone()), g.constant(h.clone()));
    let out = g.attention(av, hv, hv, 1).unwrap();
    let mut weights = a.matmul_nt(&h);
    weights.scale_assign(0.5);
    let expect = softmax_rows(&weights).matmul(&h);
    assert!(g.value(out).max_abs_diff(&expect) < 1e-14);
}

#[test]
fn shape_errors_are_reported() {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let a = g.constant(Tensor::zeros(2, 3));
    let b = g.constant(Tensor::zeros(2, 4));
    assert!(matches!(
        g.matmul(a, b),
        Err(crate::Error::ShapeMismatch { op: "matmul", .. })
    ));
    assert!(g.add(a, b).is_err());
    assert!(g.attention(a, b, b, 1).is_err());
}

#[test]
fn non_finite_gradient_names_the_op() {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let x = g.input(Tensor::filled(1, 2, 1.0));
    let big = g.scale(x, 1e308);
    let sq = g.mul(big, big).unwrap();
    let s = g.sum(sq);
    match g.backward(s) {
        Err(crate::Error::NonFiniteGradient { op }) => assert_eq!(op, "mul"),
        Ok(_) => panic!("expected failure"),
        Err(e) => panic!("unexpected {e}"),
    }
}

#[test]
fn layer_norm_rows_are_standardized() {
    let mut store = ParamStore::new();
    let gm = store.add("g", Tensor::filled(1, 4, 1.0));
    let bt = store.add("b", Tensor::zeros(1, 4));
    let mut g = Graph::new(&store);
    let x = g.constant(Tensor::new(1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let (gv, bv) = (g.param(gm), g.param(bt));
    let y = g.layer_norm(x, gv, bv).unwrap();
    let v = g.value(y);
    assert!(v.sum().abs() < 1e-12);
    let var: f64 = v.data().iter().map(|x| x * x).sum::<f64>() / 4.0;
    assert!((var - 1.25 / (1.25 + graph::LAYER_NORM_EPS)).abs() < 1e-12);
}

#[test]
fn quadratic_input_check_uses_tape() {
    let store = ParamStore::new();
    let x = Tensor::new(2, 2, vec![1.0, -2.0, 0.5, 3.0]).unwrap();
    let r = grad_check(
        &store,
        |g, x| {
            let s = g.mul(x, x)?;
            Ok(g.sum(s))
        },
        &x,
        1e-8,
    )
    .unwrap();
    assert!(r.passed());
}
