//! Evaluation metrics over coefficient sequences.
//!
//! - `fd`: mean absolute error, x100.
//! - `variation_diversity`: temporal variance per coefficient, averaged.
//! - `tlcc`: Pearson correlation of listener against lagged speaker, per lag.
//! - `rtlcc`: mean absolute gap between two TLCC curves.
//! - `rwtlcc`: `rtlcc` averaged over sliding windows.
//! - `fid_delta_fm`: Frechet distance between Gaussian fits of frame-to-frame
//!   differences, x100.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::{diff_rows, CoefficientGroup, MotionSequence};
use crate::nn::Tensor;

pub const DEFAULT_MAX_LAG: usize = 30;
pub const DEFAULT_WINDOW: usize = 120;
pub const DEFAULT_STRIDE: usize = 60;
const FID_RIDGE: f64 = 1e-6;
const FID_MIN_EIGEN: f64 = 1e-10;

fn same_len(a: &MotionSequence, b: &MotionSequence) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch { left: a.len(), right: b.len() });
    }
    Ok(())
}

pub fn fd(pred: &MotionSequence, gt: &MotionSequence, group: CoefficientGroup) -> Result<f64> {
    same_len(pred, gt)?;
    let r = group.range();
    let mut total = 0.0;
    for t in 0..pred.len() {
        let (p, g) = (&pred.frame(t)[r.clone()], &gt.frame(t)[r.clone()]);
        total += p.iter().zip(g).map(|(a, b)| (a - b).abs()).sum::<f64>();
    }
    Ok(100.0 * total / (pred.len() * r.len()) as f64)
}

/// Deviations from the mean, computed on data shifted by its first value so
/// that a constant series gives exact zeros.
fn centered(x: &[f64]) -> Vec<f64> {
    let x0 = x.first().copied().unwrap_or(0.0);
    let m = x.iter().map(|v| v - x0).sum::<f64>() / x.len() as f64;
    x.iter().map(|v| (v - x0) - m).collect()
}

/// Population variance.
fn variance(x: &[f64]) -> f64 {
    centered(x).iter().map(|d| d * d).sum::<f64>() / x.len() as f64
}

pub fn variation_diversity(seq: &MotionSequence, group: CoefficientGroup) -> Result<f64> {
    if seq.len() < 2 {
        return Err(Error::TooShort { needed: 2, found: seq.len() });
    }
    let r = group.range();
    let total: f64 = r.clone().map(|c| variance(&seq.frames().column(c))).sum();
    Ok(total / r.len() as f64)
}

/// Pearson correlation; 0 when either side has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (da, db) in centered(x).into_iter().zip(centered(y)) {
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return 0.0;
    }
    (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TlccCurve {
    pub lags: Vec<i64>,
    pub correlations: Vec<f64>,
}

impl TlccCurve {
    /// Lag with the highest correlation; the earliest on ties.
    pub fn argmax_lag(&self) -> i64 {
        let mut best = 0;
        for i in 1..self.correlations.len() {
            if self.correlations[i] > self.correlations[best] {
                best = i;
            }
        }
        self.lags[best]
    }
}

/// Correlation of `listener[t]` with `speaker[t - k]` for `k` in
/// `-max_lag..=max_lag`, averaged over the group's coefficients.
pub fn tlcc(
    listener: &MotionSequence,
    speaker: &MotionSequence,
    group: CoefficientGroup,
    max_lag: usize,
) -> Result<TlccCurve> {
    tlcc_frames(listener.frames(), speaker.frames(), group, max_lag)
}

fn tlcc_frames(listener: &Tensor, speaker: &Tensor, group: CoefficientGroup, max_lag: usize) -> Result<TlccCurve> {
    if listener.rows() != speaker.rows() {
        return Err(Error::LengthMismatch { left: listener.rows(), right: speaker.rows() });
    }
    let t_len = listener.rows();
    if t_len <= max_lag + 2 {
        return Err(Error::TooShort { needed: max_lag + 3, found: t_len });
    }
    let r = group.range();
    let cols: Vec<(Vec<f64>, Vec<f64>)> = r.map(|c| (listener.column(c), speaker.column(c))).collect();
    let m = max_lag as i64;
    let mut correlations = Vec::with_capacity(2 * max_lag + 1);
    for k in -m..=m {
        // Overlap: t in [max(0, k), T + min(0, k)).
        let lo = k.max(0) as usize;
        let hi = (t_len as i64 + k.min(0)) as usize;
        let total: f64 = cols
            .iter()
            .map(|(l, s)| {
                let ls = &l[lo..hi];
                let ss = &s[(lo as i64 - k) as usize..(hi as i64 - k) as usize];
                pearson(ls, ss)
            })
            .sum();
        correlations.push(total / cols.len() as f64);
    }
    Ok(TlccCurve { lags: (-m..=m).collect(), correlations })
}

fn curve_gap(a: &TlccCurve, b: &TlccCurve) -> f64 {
    a.correlations
        .iter()
        .zip(&b.correlations)
        .map(|(x, y)| (x - y).abs())
        .sum::<f64>()
        / a.correlations.len() as f64
}

pub fn rtlcc(
    pred: &MotionSequence,
    gt: &MotionSequence,
    speaker: &MotionSequence,
    group: CoefficientGroup,
    max_lag: usize,
) -> Result<f64> {
    same_len(pred, gt)?;
    let a = tlcc(pred, speaker, group, max_lag)?;
    let b = tlcc(gt, speaker, group, max_lag)?;
    Ok(curve_gap(&a, &b))
}

/// `rtlcc` over windows `[s, s + window)` for `s = 0, stride, ...` that fit,
/// with the lag range capped at `window / 4`.
pub fn rwtlcc(
    pred: &MotionSequence,
    gt: &MotionSequence,
    speaker: &MotionSequence,
    group: CoefficientGroup,
    window: usize,
    stride: usize,
    max_lag: usize,
) -> Result<f64> {
    same_len(pred, gt)?;
    same_len(pred, speaker)?;
    if window == 0 || stride == 0 {
        return Err(Error::InvalidRange("window and stride must be positive".into()));
    }
    if pred.len() < window {
        return Err(Error::TooShort { needed: window, found: pred.len() });
    }
    let lag = max_lag.min(window / 4);
    let mut total = 0.0;
    let mut count = 0;
    let mut s = 0;
    while s + window <= pred.len() {
        let (p, g, sp) = (
            pred.frames().slice_rows(s, window),
            gt.frames().slice_rows(s, window),
            speaker.frames().slice_rows(s, window),
        );
        total += curve_gap(&tlcc_frames(&p, &sp, group, lag)?, &tlcc_frames(&g, &sp, group, lag)?);
        count += 1;
        s += stride;
    }
    Ok(total / count as f64)
}

/// Stacks the group's frame differences of every sequence, `N x dims`.
fn pooled_diffs(set: &[MotionSequence], group: CoefficientGroup) -> Result<DMatrix<f64>> {
    let r = group.range();
    let mut rows: Vec<f64> = Vec::new();
    let mut n = 0;
    for seq in set {
        if seq.len() < 2 {
            continue;
        }
        let d = diff_rows(seq.frames())?;
        for t in 0..d.rows() {
            rows.extend_from_slice(&d.row(t)[r.clone()]);
            n += 1;
        }
    }
    Ok(DMatrix::from_row_slice(n, r.len(), &rows))
}

/// Mean and unbiased covariance of the rows, regularized with a small ridge
/// when the sample is too small or the covariance is near singular.
pub fn gaussian_fit(x: &DMatrix<f64>) -> Result<(nalgebra::DVector<f64>, DMatrix<f64>)> {
    let (n, d) = x.shape();
    if n < 2 {
        return Err(Error::InsufficientSamples(format!("{n} difference vectors, need at least 2")));
    }
    let mu = x.row_mean().transpose();
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        row -= mu.transpose();
    }
    let mut cov = centered.transpose() * &centered / (n - 1) as f64;
    let min_eig = SymmetricEigen::new(cov.clone()).eigenvalues.min();
    if n < d + 1 || min_eig < FID_MIN_EIGEN {
        cov += DMatrix::identity(d, d) * FID_RIDGE;
    }
    Ok((mu, cov))
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = SymmetricEigen::new(m.clone());
    let s = e.eigenvalues.map(|v| v.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&s) * e.eigenvectors.transpose()
}

/// Frechet distance between two Gaussians.
pub fn frechet_distance(
    mu1: &nalgebra::DVector<f64>,
    s1: &DMatrix<f64>,
    mu2: &nalgebra::DVector<f64>,
    s2: &DMatrix<f64>,
) -> f64 {
    let r1 = sym_sqrt(s1);
    let mut m = &r1 * s2 * &r1;
    // Symmetrize away round-off before the eigen solve.
    m = (&m + m.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(m).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let dm = mu1 - mu2;
    (dm.dot(&dm) + s1.trace() + s2.trace() - 2.0 * tr_sqrt).max(0.0)
}

pub fn fid_delta_fm(pred_set: &[MotionSequence], gt_set: &[MotionSequence], group: CoefficientGroup) -> Result<f64> {
    let (mu1, s1) = gaussian_fit(&pooled_diffs(pred_set, group)?)?;
    let (mu2, s2) = gaussian_fit(&pooled_diffs(gt_set, group)?)?;
    Ok(100.0 * frechet_distance(&mu1, &s1, &mu2, &s2))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    pub max_lag: usize,
    pub window: usize,
    pub stride: usize,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self { max_lag: DEFAULT_MAX_LAG, window: DEFAULT_WINDOW, stride: DEFAULT_STRIDE }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Keyed `"<metric>.<group>"`, e.g. `"fd.exp"`.
    pub values: BTreeMap<String, f64>,
    pub config: MetricConfig,
    pub sequences: usize,
    pub frames: usize,
}

/// Column order of [`MetricReport::table_csv`].
pub const TABLE_COLUMNS: [&str; 11] = [
    "fd.exp",
    "fd.angle",
    "fd.trans",
    "rtlcc.exp",
    "rtlcc.pose",
    "rwtlcc.exp",
    "rwtlcc.pose",
    "fid_delta_fm.exp",
    "fid_delta_fm.pose",
    "vd.exp",
    "vd.pose",
];

impl MetricReport {
    pub fn get(&self, key: &str) -> Option<f64> {
        self.values.get(key).copied()
    }

    /// Header plus one row; RWTLCC cells are empty when sequences are shorter
    /// than the window.
    pub fn table_csv(&self) -> String {
        let cells: Vec<String> = TABLE_COLUMNS
            .iter()
            .map(|k| self.get(k).map(|v| format!("{v}")).unwrap_or_default())
            .collect();
        format!("{}\n{}\n", TABLE_COLUMNS.join(","), cells.join(","))
    }
}

/// Per-sequence metrics averaged over the set; FID over the pooled set.
pub fn evaluate(
    preds: &[MotionSequence],
    gts: &[MotionSequence],
    speakers: &[MotionSequence],
    config: &MetricConfig,
) -> Result<MetricReport> {
    use CoefficientGroup::*;
    if preds.len() != gts.len() || preds.len() != speakers.len() {
        return Err(Error::LengthMismatch { left: preds.len(), right: gts.len().min(speakers.len()) });
    }
    if preds.is_empty() {
        return Err(Error::InsufficientSamples("no sequences to evaluate".into()));
    }
    let n = preds.len() as f64;
    let mut values = BTreeMap::new();
    let avg = |f: &dyn Fn(usize) -> Result<f64>| -> Result<f64> {
        let mut s = 0.0;
        for i in 0..preds.len() {
            s += f(i)?;
        }
        Ok(s / n)
    };
    for g in [Expression, Angle, Translation, Pose, All] {
        values.insert(format!("fd.{}", g.name()), avg(&|i| fd(&preds[i], &gts[i], g))?);
    }
    for g in [Expression, Pose, All] {
        let name = g.name();
        values.insert(
            format!("rtlcc.{name}"),
            avg(&|i| rtlcc(&preds[i], &gts[i], &speakers[i], g, config.max_lag))?,
        );
        if preds.iter().all(|p| p.len() >= config.window) {
            values.insert(
                format!("rwtlcc.{name}"),
                avg(&|i| rwtlcc(&preds[i], &gts[i], &speakers[i], g, config.window, config.stride, config.max_lag))?,
            );
        }
        values.insert(format!("fid_delta_fm.{name}"), fid_delta_fm(preds, gts, g)?);
        values.insert(format!("vd.{name}"), avg(&|i| variation_diversity(&preds[i], g))?);
    }
    Ok(MetricReport {
        values,
        config: config.clone(),
        sequences: preds.len(),
        frames: preds.iter().map(MotionSequence::len).sum(),
    })
}
