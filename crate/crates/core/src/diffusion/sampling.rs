use rand::Rng;

use super::schedule::{p_sample_step, q_sample, NoiseSchedule};
use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Anything that predicts the noise in `x` at diffusion step `k` for a fixed
/// condition.
pub trait NoisePredictor {
    fn predict(&self, x: &Tensor, k: usize) -> Result<Tensor>;
}

impl<F: Fn(&Tensor, usize) -> Result<Tensor>> NoisePredictor for F {
    fn predict(&self, x: &Tensor, k: usize) -> Result<Tensor> {
        self(x, k)
    }
}

/// Runs the reverse chain from `init` at step `steps - 1` down to 0. `z(k)`
/// supplies the step noise for `k >= 1`; `None` means a deterministic step.
pub fn reverse_chain(
    pred: &impl NoisePredictor,
    init: &Tensor,
    sched: &NoiseSchedule,
    mut z: impl FnMut(usize) -> Option<Tensor>,
) -> Result<Tensor> {
    let mut x = init.clone();
    for k in (0..sched.steps()).rev() {
        let eps_hat = pred.predict(&x, k)?;
        let noise = if k > 0 { z(k) } else { None };
        x = p_sample_step(&x, &eps_hat, k, sched, noise.as_ref())?;
        if let Some((row, col)) = x.first_non_finite() {
            return Err(Error::NumericFailure(format!(
                "sample became non-finite at step {k}, frame {row}, coefficient {col}"
            )));
        }
    }
    Ok(x)
}

/// Full stochastic reverse chain; step noises are drawn from `rng` in step
/// order, so the result is a pure function of the predictor, `init` and the
/// RNG state.
pub fn generate_segment(
    pred: &impl NoisePredictor,
    init: &Tensor,
    sched: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    let (r, c) = (init.rows(), init.cols());
    reverse_chain(pred, init, sched, |_| Some(Tensor::randn(r, c, 1.0, rng)))
}

/// Mean over the batch of the per-sample noise-prediction MSE, each sample
/// with its own uniform step and Gaussian noise.
pub fn diffusion_loss(
    pred: &impl NoisePredictor,
    batch: &[Tensor],
    sched: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InsufficientSamples("empty batch".into()));
    }
    let mut total = 0.0;
    for x0 in batch {
        let k = rng.random_range(0..sched.steps());
        let eps = Tensor::randn(x0.rows(), x0.cols(), 1.0, rng);
        let xk = q_sample(x0, k, &eps, sched)?;
        let eps_hat = pred.predict(&xk, k)?;
        let d = eps_hat.zip_map(&eps, |a, b| (a - b) * (a - b));
        total += d.mean();
    }
    Ok(total / batch.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::super::make_schedule;
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Predictor that knows `x0` and returns the exact noise of the current sample.
    fn oracle<'a>(x0: &'a Tensor, sched: &'a NoiseSchedule) -> impl Fn(&Tensor, usize) -> Result<Tensor> + 'a {
        move |x: &Tensor, k: usize| {
            let ab = sched.alpha_bar()[k];
            let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
            Ok(x.zip_map(x0, |xt, x0| (xt - a * x0) / b))
        }
    }

    #[test]
    fn oracle_reverse_chain_recovers_x0() {
        for steps in [10, 50, 200] {
            let s = make_schedule(steps, 1e-4, 0.02).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(steps as u64);
            let x0 = Tensor::randn(60, 70, 1.0, &mut rng);
            let eps = Tensor::randn(60, 70, 1.0, &mut rng);
            let xt = q_sample(&x0, steps - 1, &eps, &s).unwrap();
            let back = reverse_chain(&oracle(&x0, &s), &xt, &s, |_| None).unwrap();
            assert!(back.max_abs_diff(&x0) <= 1e-6, "T_d={steps}: {}", back.max_abs_diff(&x0));
        }
    }

    #[test]
    fn exact_noise_stub_gives_zero_loss() {
        // The stub re-derives the noise from x_k, which is what the loss drew.
        let s = make_schedule(30, 1e-4, 0.02).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0 = Tensor::randn(4, 70, 1.0, &mut rng);
        let loss = diffusion_loss(&oracle(&x0, &s), std::slice::from_ref(&x0), &s, &mut rng).unwrap();
        assert!(loss < 1e-20, "{loss}");
    }

    #[test]
    fn zero_predictor_loss_is_noise_variance() {
        let s = make_schedule(30, 1e-4, 0.02).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batch: Vec<Tensor> = (0..4).map(|_| Tensor::randn(60, 70, 1.0, &mut rng)).collect();
        let zero = |x: &Tensor, _k: usize| Ok(Tensor::zeros(x.rows(), x.cols()));
        let loss = diffusion_loss(&zero, &batch, &s, &mut rng).unwrap();
        assert!((loss - 1.0).abs() < 0.05, "{loss}");
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        let s = make_schedule(20, 1e-4, 0.02).unwrap();
        let pred = |x: &Tensor, k: usize| Ok(x.map(|v| (v * 0.1 + k as f64 * 1e-3).tanh()));
        let init = Tensor::randn(5, 70, 1.0, &mut ChaCha8Rng::seed_from_u64(0));
        let a = generate_segment(&pred, &init, &s, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = generate_segment(&pred, &init, &s, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let c = generate_segment(&pred, &init, &s, &mut ChaCha8Rng::seed_from_u64(10)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.is_finite());
    }

    #[test]
    fn exploding_predictor_is_reported() {
        let s = make_schedule(10, 1e-4, 0.02).unwrap();
        let pred = |x: &Tensor, _k: usize| Ok(x.map(|_| f64::INFINITY));
        let err = reverse_chain(&pred, &Tensor::zeros(2, 70), &s, |_| None).unwrap_err();
        assert!(matches!(err, Error::NumericFailure(_)));
    }
}
