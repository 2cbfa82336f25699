use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { steps: 200, beta_start: 1e-4, beta_end: 0.02 }
    }
}

/// Linear variance schedule with cached `alpha` and `alpha_bar`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(Error::InvalidRange(format!("need at least 2 diffusion steps, got {steps}")));
    }
    if !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
        return Err(Error::InvalidRange(format!(
            "need 0 < beta_start < beta_end < 1, got {beta_start} and {beta_end}"
        )));
    }
    let span = (steps - 1) as f64;
    let beta: Vec<f64> = (0..steps)
        .map(|k| beta_start + (beta_end - beta_start) * k as f64 / span)
        .collect();
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let alpha_bar = alpha
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    Ok(NoiseSchedule { beta, alpha, alpha_bar })
}

impl NoiseSchedule {
    pub fn from_config(c: &ScheduleConfig) -> Result<Self> {
        make_schedule(c.steps, c.beta_start, c.beta_end)
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub(crate) fn check(&self, k: usize) -> Result<()> {
        if k >= self.steps() {
            return Err(Error::StepOutOfRange { step: k, steps: self.steps() });
        }
        Ok(())
    }
}

/// `x_k = sqrt(alpha_bar[k]) x0 + sqrt(1 - alpha_bar[k]) eps`.
pub fn q_sample(x0: &Tensor, k: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check(k)?;
    if x0.shape() != eps.shape() {
        return Err(Error::ShapeMismatch {
            op: "q_sample",
            detail: format!("x0 {:?} vs eps {:?}", x0.shape(), eps.shape()),
        });
    }
    let ab = sched.alpha_bar[k];
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.zip_map(eps, |x, e| a * x + b * e))
}

/// One reverse step from `x_k`:
/// `mu = (x_k - beta_k / sqrt(1 - alpha_bar_k) eps_hat) / sqrt(alpha_k)`,
/// `x_{k-1} = mu + sqrt(beta_k) z`. `z` is ignored at `k = 0`.
pub fn p_sample_step(
    x: &Tensor,
    eps_hat: &Tensor,
    k: usize,
    sched: &NoiseSchedule,
    z: Option<&Tensor>,
) -> Result<Tensor> {
    sched.check(k)?;
    if x.shape() != eps_hat.shape() {
        return Err(Error::ShapeMismatch {
            op: "p_sample_step",
            detail: format!("x {:?} vs eps_hat {:?}", x.shape(), eps_hat.shape()),
        });
    }
    let (beta, alpha, ab) = (sched.beta[k], sched.alpha[k], sched.alpha_bar[k]);
    let coef = beta / (1.0 - ab).sqrt();
    let inv = 1.0 / alpha.sqrt();
    let mut out = x.zip_map(eps_hat, |x, e| inv * (x - coef * e));
    if k > 0 {
        if let Some(z) = z {
            if z.shape() != x.shape() {
                return Err(Error::ShapeMismatch {
                    op: "p_sample_step",
                    detail: format!("x {:?} vs z {:?}", x.shape(), z.shape()),
                });
            }
            let s = beta.sqrt();
            out = out.zip_map(z, |m, z| m + s * z);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn two_step_schedule_by_hand() {
        let s = make_schedule(2, 1e-4, 0.02).unwrap();
        assert_eq!(s.beta(), &[1e-4, 0.02]);
        assert_eq!(s.alpha_bar()[0], 1.0 - 1e-4);
        assert!((s.alpha_bar()[1] - 0.979_902).abs() < 1e-15);
    }

    #[test]
    fn invalid_ranges_are_rejected() {
        assert!(make_schedule(1, 1e-4, 0.02).is_err());
        assert!(make_schedule(10, 0.02, 1e-4).is_err());
        assert!(make_schedule(10, 0.0, 0.02).is_err());
        assert!(make_schedule(10, 1e-4, 1.0).is_err());
    }

    #[test]
    fn q_sample_special_cases() {
        let s = make_schedule(50, 1e-4, 0.02).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x0 = Tensor::randn(4, 70, 1.0, &mut rng);
        let eps = Tensor::randn(4, 70, 1.0, &mut rng);
        let zero = Tensor::zeros(4, 70);
        let xt = q_sample(&x0, 7, &zero, &s).unwrap();
        let a = s.alpha_bar()[7].sqrt();
        assert_eq!(xt, x0.map(|v| a * v));
        // Smallest-noise step stays close to x0.
        assert!(q_sample(&x0, 0, &eps, &s).unwrap().max_abs_diff(&x0) < 0.05);
        assert!(matches!(q_sample(&x0, 50, &eps, &s), Err(Error::StepOutOfRange { step: 50, .. })));
    }

    #[test]
    fn zero_noise_step_is_a_rescale() {
        let s = make_schedule(20, 1e-4, 0.02).unwrap();
        let x = Tensor::from_fn(3, 5, |r, c| r as f64 - c as f64 * 0.5);
        let out = p_sample_step(&x, &Tensor::zeros(3, 5), 9, &s, Some(&Tensor::zeros(3, 5))).unwrap();
        let inv = 1.0 / s.alpha()[9].sqrt();
        assert_eq!(out, x.map(|v| inv * v));
    }

    #[test]
    fn composed_single_steps_match_the_marginal() {
        // Iterate x_k = sqrt(1-beta_k) x_{k-1} + sqrt(beta_k) n_k from x0 and
        // compare sample moments with the closed form.
        let s = make_schedule(50, 1e-4, 0.02).unwrap();
        let (k, x0, trials) = (30, 1.5, 100_000);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let samples: Vec<f64> = (0..trials)
            .map(|_| {
                let mut x = x0;
                for b in &s.beta()[..=k] {
                    let n: f64 = StandardNormal.sample(&mut rng);
                    x = (1.0 - b).sqrt() * x + b.sqrt() * n;
                }
                x
            })
            .collect();
        let mean = samples.iter().sum::<f64>() / trials as f64;
        let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / trials as f64;
        let ab = s.alpha_bar()[k];
        let sigma = ((1.0 - ab) / trials as f64).sqrt();
        assert!((mean - ab.sqrt() * x0).abs() < 3.0 * sigma);
        assert!((var / (1.0 - ab) - 1.0).abs() < 0.02);
    }

    #[test]
    fn reverse_step_variance_is_beta() {
        let s = make_schedule(50, 1e-4, 0.02).unwrap();
        let k = 25;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::filled(1, 1, 0.3);
        let eps_hat = Tensor::filled(1, 1, -0.2);
        let n = 10_000;
        let draws: Vec<f64> = (0..n)
            .map(|_| {
                let z = Tensor::randn(1, 1, 1.0, &mut rng);
                p_sample_step(&x, &eps_hat, k, &s, Some(&z)).unwrap().get(0, 0)
            })
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        assert!((var / s.beta()[k] - 1.0).abs() < 0.05, "{var}");
    }

    proptest! {
        #[test]
        fn alpha_bar_is_the_running_product(steps in 2usize..300, lo in 1e-5f64..1e-3, span in 1e-3f64..0.5) {
            let s = make_schedule(steps, lo, lo + span).unwrap();
            let mut prod = 1.0;
            for k in 0..steps {
                prod *= 1.0 - s.beta()[k];
                prop_assert!((s.alpha_bar()[k] - prod).abs() <= 1e-15);
                prop_assert!(s.alpha_bar()[k] > 0.0 && s.alpha_bar()[k] < 1.0);
                if k > 0 {
                    prop_assert!(s.beta()[k] > s.beta()[k - 1]);
                    prop_assert!(s.alpha_bar()[k] < s.alpha_bar()[k - 1]);
                }
            }
            prop_assert_eq!(s.alpha_bar()[0], 1.0 - lo);
        }
    }
}
