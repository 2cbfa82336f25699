//! Denoising diffusion over motion segments.
//!
//! Diffusion steps are indexed `k = 0..steps`, where step `k` uses `beta[k]`
//! and `alpha_bar[k] = prod_{s <= k} (1 - beta[s])`. The reverse chain runs
//! from `k = steps - 1` down to `k = 0` and adds no noise on the final step.

pub mod denoiser;
pub mod sampling;
mod schedule;

pub use denoiser::{Denoiser, DenoiserConfig};
pub use sampling::{diffusion_loss, generate_segment, reverse_chain, NoisePredictor};
pub use schedule::{make_schedule, p_sample_step, q_sample, NoiseSchedule, ScheduleConfig};
