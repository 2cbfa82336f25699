pub mod diffusion;
pub mod error;
pub mod metrics;
pub mod model;
pub mod motion;
pub mod nn;
pub mod pgg;
pub mod pipeline;
pub mod portrait;
pub mod sdp;
pub mod synth;
pub mod text;
pub mod train;

pub use error::{Error, Result};
