//! Transformer-decoder noise predictor.
//!
//! Noised motion frames are embedded with one affine map plus sinusoidal
//! positions; an embedding of the diffusion step is appended as an extra
//! token. Decoder layers self-attend over that sequence and cross-attend to
//! the condition sequence. The step token's output row is dropped.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::MOTION_DIMS;
use crate::nn::layers::{DecoderLayer, LayerNorm, Linear};
use crate::nn::{Graph, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self { dim: 64, layers: 4, heads: 4, ffn: 256 }
    }
}

/// Sinusoidal embedding of diffusion step `k`, `1 x dim`.
pub fn step_embedding(k: usize, dim: usize) -> Tensor {
    Tensor::from_fn(1, dim, |_, c| {
        let freq = 1.0 / 10000f64.powf(2.0 * (c / 2) as f64 / dim as f64);
        let a = k as f64 * freq;
        if c % 2 == 0 {
            a.sin()
        } else {
            a.cos()
        }
    })
}

#[derive(Clone, Debug)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub motion_in: Linear,
    pub step_in: Linear,
    pub layers: Vec<DecoderLayer>,
    pub norm: LayerNorm,
    pub out: Linear,
}

impl Denoiser {
    pub fn new(store: &mut ParamStore, name: &str, config: DenoiserConfig, rng: &mut impl Rng) -> Self {
        let DenoiserConfig { dim, layers, heads, ffn } = config;
        Self {
            config,
            motion_in: Linear::new(store, &format!("{name}.motion_in"), MOTION_DIMS, dim, rng),
            step_in: Linear::new(store, &format!("{name}.step_in"), dim, dim, rng),
            layers: (0..layers)
                .map(|i| DecoderLayer::new(store, &format!("{name}.layer{i}"), dim, heads, ffn, rng))
                .collect(),
            norm: LayerNorm::new(store, &format!("{name}.norm"), dim),
            out: Linear::new(store, &format!("{name}.out"), dim, MOTION_DIMS, rng),
        }
    }

    /// Predicted noise for `x` (`L x 70`) at step `k` given `cond` (`L_c x C`).
    pub fn forward(&self, g: &mut Graph, x: Var, cond: Var, k: usize) -> Result<Var> {
        let [len, width] = g.shape(x);
        let [_, cw] = g.shape(cond);
        if width != MOTION_DIMS || cw != self.config.dim {
            return Err(Error::ShapeMismatch {
                op: "denoise",
                detail: format!("motion width {width}, condition width {cw}, model width {}", self.config.dim),
            });
        }
        let h = self.motion_in.forward(g, x)?;
        let h = g.positional(h);
        let step = g.constant(step_embedding(k, self.config.dim));
        let step = self.step_in.forward(g, step)?;
        let mut h = g.concat_rows(&[h, step])?;
        for layer in &self.layers {
            h = layer.forward(g, h, cond)?;
        }
        let h = self.norm.forward(g, h)?;
        let h = g.slice_rows(h, 0, len)?;
        self.out.forward(g, h)
    }

    pub fn predict(&self, store: &ParamStore, x: &Tensor, cond: &Tensor, k: usize) -> Result<Tensor> {
        let mut g = Graph::new(store);
        let (xv, cv) = (g.constant(x.clone()), g.constant(cond.clone()));
        let out = self.forward(&mut g, xv, cv, k)?;
        Ok(g.value(out).clone())
    }
}
