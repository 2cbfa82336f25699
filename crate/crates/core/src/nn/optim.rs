use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

struct Moments {
    m: Tensor,
    v: Tensor,
}

/// Adam with decoupled weight decay. Moments are keyed by parameter name, so
/// the update does not depend on registration order.
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    moments: HashMap<String, Moments>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update from the gradients currently stored in `store`.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.step += 1;
        let AdamWConfig {
            lr,
            weight_decay,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for p in store.iter_mut() {
            let st = self.moments.entry(p.name.clone()).or_insert_with(|| Moments {
                m: Tensor::zeros(p.value.rows(), p.value.cols()),
                v: Tensor::zeros(p.value.rows(), p.value.cols()),
            });
            let decay = 1.0 - lr * weight_decay;
            let values = p.value.data_mut();
            let (m, v) = (st.m.data_mut(), st.v.data_mut());
            for (i, &g) in p.grad.data().iter().enumerate() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                values[i] = values[i] * decay - lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}
