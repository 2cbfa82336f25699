//! Past-guided motion prior.
//!
//! Frames of the current segment look up similar frames of the previous
//! segment through their dynamic tokens; the prior is the similarity-weighted
//! mixture of the previous segment's motion. Similarities are scaled by
//! `1/sqrt(C)` and row-normalized with softmax, so every prior frame is a
//! convex combination of past frames.

use crate::error::{Error, Result};
use crate::motion::MOTION_DIMS;
use crate::nn::{softmax_rows, Graph, Tensor, Var};

/// Prior for one segment, `L_seg x 70`. The first segment of a sequence has
/// no history and gets an all-zero prior flagged with `is_zero`.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionPrior {
    pub prior: Tensor,
    pub is_zero: bool,
}

pub fn first_segment_prior(len: usize) -> Result<MotionPrior> {
    if len == 0 {
        return Err(Error::EmptySequence);
    }
    Ok(MotionPrior { prior: Tensor::zeros(len, MOTION_DIMS), is_zero: true })
}

/// `softmax(cur prev^T / sqrt(C))`, `L_seg x L_seg`.
pub fn segment_similarity(cur: &Tensor, prev: &Tensor) -> Result<Tensor> {
    if cur.shape() != prev.shape() {
        return Err(Error::ShapeMismatch {
            op: "segment_similarity",
            detail: format!("current {:?} vs previous {:?}", cur.shape(), prev.shape()),
        });
    }
    let mut raw = cur.matmul_nt(prev);
    raw.scale_assign(1.0 / (cur.cols() as f64).sqrt());
    Ok(softmax_rows(&raw))
}

/// `G = sim x past`.
pub fn motion_prior(sim: &Tensor, past: &Tensor) -> Result<MotionPrior> {
    if sim.cols() != past.rows() || past.cols() != MOTION_DIMS {
        return Err(Error::ShapeMismatch {
            op: "motion_prior",
            detail: format!("similarity {:?} vs past motion {:?}", sim.shape(), past.shape()),
        });
    }
    Ok(MotionPrior { prior: sim.matmul(past), is_zero: false })
}

/// Differentiable prior: gradients reach both token sequences and `past`.
pub fn prior_on_graph(g: &mut Graph, cur: Var, prev: Var, past: Var) -> Result<Var> {
    let [_, c] = g.shape(cur);
    let raw = g.matmul_nt(cur, prev)?;
    let raw = g.scale(raw, 1.0 / (c as f64).sqrt());
    let sim = g.softmax(raw);
    g.matmul(sim, past)
}
