//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Each export has a plain Rust counterpart returning `Result<String, String>`
//! so the logic is testable off the browser.

use listenhead::diffusion::make_schedule;
use listenhead::metrics::tlcc;
use listenhead::motion::CoefficientGroup;
use listenhead::synth::{gen_pair, SynthConfig};
use listenhead::text::{parse_text_prior, render_text_prior, ListenerAnnotation};
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Serialize)]
struct RenderedPrior {
    text: String,
    parsed_back: bool,
}

/// Renders an annotation given as JSON and checks that the text parses back
/// to the same annotation.
pub fn render_prior_json(annotation: &str, seed: u64) -> Result<String, String> {
    let ann: ListenerAnnotation = serde_json::from_str(annotation).map_err(|e| e.to_string())?;
    let prior = render_text_prior(&ann, seed).map_err(|e| e.to_string())?;
    let parsed_back = parse_text_prior(&prior.text).map(|a| a == ann).unwrap_or(false);
    serde_json::to_string(&RenderedPrior { text: prior.text, parsed_back }).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct SynchronyCurve {
    lags: Vec<i64>,
    correlations: Vec<f64>,
    peak_lag: i64,
}

/// TLCC curve of a synthetic pair whose listener echoes the speaker `lag`
/// frames later.
pub fn synchrony_curve_json(lag: usize, gain: f64, noise_std: f64, seed: u64) -> Result<String, String> {
    let cfg = SynthConfig {
        seed,
        lag,
        gain,
        noise_std,
        habit_dims: vec![],
        emotion_scale: 0.0,
        frames: 240,
        ..Default::default()
    };
    let pair = gen_pair(&cfg).map_err(|e| e.to_string())?;
    let curve = tlcc(&pair.listener, &pair.speaker, CoefficientGroup::All, 30).map_err(|e| e.to_string())?;
    let peak_lag = curve.argmax_lag();
    serde_json::to_string(&SynchronyCurve { lags: curve.lags, correlations: curve.correlations, peak_lag })
        .map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct Schedule {
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

pub fn schedule_json(steps: usize, beta_start: f64, beta_end: f64) -> Result<String, String> {
    let s = make_schedule(steps, beta_start, beta_end).map_err(|e| e.to_string())?;
    serde_json::to_string(&Schedule { beta: s.beta().to_vec(), alpha_bar: s.alpha_bar().to_vec() })
        .map_err(|e| e.to_string())
}

#[wasm_bindgen]
pub fn render_prior(annotation: &str, seed: u32) -> Result<String, JsValue> {
    render_prior_json(annotation, seed as u64).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn synchrony_curve(lag: u32, gain: f64, noise_std: f64, seed: u32) -> Result<String, JsValue> {
    synchrony_curve_json(lag as usize, gain, noise_std, seed as u64).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn noise_schedule(steps: u32, beta_start: f64, beta_end: f64) -> Result<String, JsValue> {
    schedule_json(steps as usize, beta_start, beta_end).map_err(|e| JsValue::from_str(&e))
}
