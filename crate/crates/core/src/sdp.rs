//! Static-to-dynamic portrait tokens.
//!
//! Audio features attend over the static text tokens to give one mixed token
//! per frame (`E = softmax(A' H'^T / sqrt(C)) H`). Each frame is then
//! concatenated with a speaker-motion amplitude vector and projected back to
//! width `C`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::motion::MOTION_DIMS;
use crate::nn::layers::{Conv1d, EncoderLayer, Linear};
use crate::nn::{softmax_rows, Graph, ParamStore, Tensor, Var};

pub const ACOUSTIC_DIMS: usize = 45;
pub const DEFAULT_WINDOW: usize = 5;
/// Upper bound on `|diff|` before exponentiation.
pub const DIFF_CLAMP: f64 = 10.0;

/// `T x 45` per-frame acoustic features.
#[derive(Clone, Debug, PartialEq)]
pub struct AcousticFeatures {
    frames: Tensor,
}

impl AcousticFeatures {
    pub fn new(frames: Tensor) -> Result<Self> {
        if frames.cols() != ACOUSTIC_DIMS {
            return Err(Error::WidthMismatch { line: 0, expected: ACOUSTIC_DIMS, found: frames.cols() });
        }
        if frames.rows() == 0 {
            return Err(Error::EmptySequence);
        }
        if let Some((row, col)) = frames.first_non_finite() {
            return Err(Error::NonFiniteValue { row, col });
        }
        Ok(Self { frames })
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn slice(&self, start: usize, len: usize) -> Self {
        Self { frames: self.frames.slice_rows(start, len) }
    }
}

/// Two kernel-3 convolutions with GELU between, self-attention layers and a
/// final affine map. `T x 45 -> T x C`.
#[derive(Clone, Debug)]
pub struct AudioEncoder {
    pub conv1: Conv1d,
    pub conv2: Conv1d,
    pub layers: Vec<EncoderLayer>,
    pub out: Linear,
}

impl AudioEncoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        layers: usize,
        heads: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            conv1: Conv1d::new(store, &format!("{name}.conv1"), ACOUSTIC_DIMS, dim, rng),
            conv2: Conv1d::new(store, &format!("{name}.conv2"), dim, dim, rng),
            layers: (0..layers)
                .map(|i| EncoderLayer::new(store, &format!("{name}.layer{i}"), dim, heads, hidden, rng))
                .collect(),
            out: Linear::new(store, &format!("{name}.out"), dim, dim, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, feats: Var) -> Result<Var> {
        let h = self.conv1.forward(g, feats)?;
        let h = g.gelu(h);
        let mut h = self.conv2.forward(g, h)?;
        for layer in &self.layers {
            h = layer.forward(g, h)?;
        }
        self.out.forward(g, h)
    }

    pub fn encode_audio(&self, store: &ParamStore, feats: &AcousticFeatures) -> Result<Tensor> {
        let mut g = Graph::new(store);
        let x = g.constant(feats.frames.clone());
        let y = self.forward(&mut g, x)?;
        Ok(g.value(y).clone())
    }
}

/// Learned projections of audio and text before the responsive product.
#[derive(Clone, Debug)]
pub struct ResponsiveInteraction {
    pub audio: Linear,
    pub text: Linear,
}

impl ResponsiveInteraction {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            audio: Linear::new(store, &format!("{name}.audio"), dim, dim, rng),
            text: Linear::new(store, &format!("{name}.text"), dim, dim, rng),
        }
    }

    /// `T x L` responsive weights.
    pub fn forward(&self, g: &mut Graph, audio: Var, tokens: Var) -> Result<Var> {
        let [_, ca] = g.shape(audio);
        let [_, ct] = g.shape(tokens);
        if ca != ct {
            return Err(Error::WidthMismatch { line: 0, expected: ca, found: ct });
        }
        let pa = self.audio.forward(g, audio)?;
        let ph = self.text.forward(g, tokens)?;
        let logits = g.matmul_nt(pa, ph)?;
        let logits = g.scale(logits, 1.0 / (ca as f64).sqrt());
        Ok(g.softmax(logits))
    }

    pub fn responsive_weight_matrix(&self, store: &ParamStore, audio: &Tensor, tokens: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new(store);
        let (a, h) = (g.constant(audio.clone()), g.constant(tokens.clone()));
        let m = self.forward(&mut g, a, h)?;
        Ok(g.value(m).clone())
    }
}

/// Row softmax of `pa pt^T / sqrt(C)` for already projected inputs.
pub fn responsive_weights(projected_audio: &Tensor, projected_tokens: &Tensor) -> Result<Tensor> {
    let c = projected_audio.cols();
    if projected_tokens.cols() != c {
        return Err(Error::WidthMismatch { line: 0, expected: c, found: projected_tokens.cols() });
    }
    let mut logits = projected_audio.matmul_nt(projected_tokens);
    logits.scale_assign(1.0 / (c as f64).sqrt());
    Ok(softmax_rows(&logits))
}

/// `E = M H`: each frame mixes the static tokens with its row of weights.
pub fn time_dependent_tokens(m: &Tensor, h: &Tensor) -> Result<Tensor> {
    if m.cols() != h.rows() {
        return Err(Error::ShapeMismatch {
            op: "time_dependent_tokens",
            detail: format!("weights {:?} vs tokens {:?}", m.shape(), h.shape()),
        });
    }
    Ok(m.matmul(h))
}

/// Uniform `T x L` weights, used to ablate the audio-text interaction.
pub fn uniform_weights(frames: usize, tokens: usize) -> Tensor {
    Tensor::filled(frames, tokens, 1.0 / tokens as f64)
}

/// Speaker motion amplitude: row `t` sums `exp(min(|S_i - S_{i-1}|, 10))`
/// over `i` in `t-w..t`, per coefficient. Positions without a predecessor
/// frame contribute `exp(0) = 1`, so row `t` depends on frames before `t` only.
pub fn speaker_motion_weight(speaker: &Tensor, window: usize) -> Result<Tensor> {
    if window == 0 {
        return Err(Error::InvalidRange("speaker motion window must be positive".into()));
    }
    let (t_len, dims) = (speaker.rows(), speaker.cols());
    if t_len == 0 {
        return Err(Error::EmptySequence);
    }
    if window >= t_len {
        log::warn!("speaker motion window {window} covers the whole {t_len}-frame segment");
    }
    // term[i] = exp(clamp|S_i - S_{i-1}|) with term[0] = 1.
    let term = Tensor::from_fn(t_len, dims, |i, c| {
        if i == 0 {
            1.0
        } else {
            (speaker.get(i, c) - speaker.get(i - 1, c)).abs().min(DIFF_CLAMP).exp()
        }
    });
    let mut out = Tensor::zeros(t_len, dims);
    for t in 0..t_len {
        let row = out.row_mut(t);
        for i in t as isize - window as isize..t as isize {
            if i < 0 {
                row.iter_mut().for_each(|v| *v += 1.0);
            } else {
                row.iter_mut().zip(term.row(i as usize)).for_each(|(v, x)| *v += x);
            }
        }
    }
    Ok(out)
}

/// Affine projection of `[E | Ebar]` (`C + 70`) back to `C`.
#[derive(Clone, Debug)]
pub struct DynamicProjection {
    pub proj: Linear,
}

impl DynamicProjection {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut impl Rng) -> Self {
        Self { proj: Linear::new(store, &format!("{name}.proj"), dim + MOTION_DIMS, dim, rng) }
    }

    pub fn forward(&self, g: &mut Graph, e: Var, ebar: Var) -> Result<Var> {
        let (te, tb) = (g.shape(e)[0], g.shape(ebar)[0]);
        if te != tb {
            return Err(Error::ShapeMismatch {
                op: "dynamic_tokens",
                detail: format!("{te} token frames vs {tb} motion-weight frames"),
            });
        }
        let cat = g.concat_cols(&[e, ebar])?;
        self.proj.forward(g, cat)
    }

    pub fn dynamic_tokens(&self, store: &ParamStore, e: &Tensor, ebar: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new(store);
        let (ev, bv) = (g.constant(e.clone()), g.constant(ebar.clone()));
        let d = self.forward(&mut g, ev, bv)?;
        Ok(g.value(d).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{grad_check, grad_check_params};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const C: usize = 8;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn encoder(seed: u64) -> (ParamStore, AudioEncoder) {
        let mut store = ParamStore::new();
        let enc = AudioEncoder::new(&mut store, "audio", C, 2, 2, 16, &mut rng(seed));
        (store, enc)
    }

    #[test]
    fn zero_audio_with_zero_biases_encodes_to_zero() {
        let (mut store, enc) = encoder(1);
        for p in store.iter_mut() {
            if p.name.ends_with(".b") {
                p.value.scale_assign(0.0);
            }
        }
        let y = enc
            .encode_audio(&store, &AcousticFeatures::new(Tensor::zeros(6, ACOUSTIC_DIMS)).unwrap())
            .unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_frame_audio_encodes() {
        let (store, enc) = encoder(2);
        let x = AcousticFeatures::new(Tensor::randn(1, ACOUSTIC_DIMS, 1.0, &mut rng(3))).unwrap();
        let y = enc.encode_audio(&store, &x).unwrap();
        assert_eq!(y.shape(), [1, C]);
        assert!(y.is_finite());
    }

    #[test]
    fn audio_encoder_input_jacobian_matches_finite_differences() {
        let (store, enc) = encoder(4);
        let x = Tensor::randn(4, ACOUSTIC_DIMS, 1.0, &mut rng(5));
        let proj = Tensor::randn(4, C, 1.0, &mut rng(6));
        let r = grad_check(
            &store,
            |g, x| {
                let y = enc.forward(g, x)?;
                g.weighted_sum(y, proj.clone())
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(r.passed(), "max rel err {}", r.max_rel_err);
    }

    #[test]
    fn acoustic_width_is_checked() {
        assert!(matches!(
            AcousticFeatures::new(Tensor::zeros(3, 44)),
            Err(Error::WidthMismatch { found: 44, .. })
        ));
    }

    #[test]
    fn single_token_weights_are_one() {
        let pa = Tensor::randn(7, C, 3.0, &mut rng(1));
        let ph = Tensor::randn(1, C, 3.0, &mut rng(2));
        let m = responsive_weights(&pa, &ph).unwrap();
        assert!(m.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn identical_audio_rows_give_identical_weight_rows() {
        let mut store = ParamStore::new();
        let ri = ResponsiveInteraction::new(&mut store, "ri", C, &mut rng(3));
        let row = Tensor::randn(1, C, 1.0, &mut rng(4));
        let a = Tensor::from_fn(5, C, |_, c| row.get(0, c));
        let h = Tensor::randn(4, C, 1.0, &mut rng(5));
        let m = ri.responsive_weight_matrix(&store, &a, &h).unwrap();
        for r in 1..5 {
            assert_eq!(m.row(r), m.row(0));
        }
    }

    #[test]
    fn weights_match_brute_force_dot_products() {
        let pa = Tensor::new(3, 2, vec![0.5, -1.0, 2.0, 0.25, -0.75, 1.5]).unwrap();
        let ph = Tensor::new(2, 2, vec![1.0, 2.0, -0.5, 0.3]).unwrap();
        let m = responsive_weights(&pa, &ph).unwrap();
        for t in 0..3 {
            let logits: Vec<f64> = (0..2)
                .map(|i| (pa.get(t, 0) * ph.get(i, 0) + pa.get(t, 1) * ph.get(i, 1)) / 2f64.sqrt())
                .collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            for i in 0..2 {
                assert!((m.get(t, i) - logits[i].exp() / z).abs() < 1e-12);
            }
        }
        assert!(matches!(
            responsive_weights(&pa, &Tensor::zeros(2, 3)),
            Err(Error::WidthMismatch { .. })
        ));
    }

    #[test]
    fn one_hot_weights_select_tokens() {
        let h = Tensor::randn(3, 4, 1.0, &mut rng(7));
        let m = Tensor::from_fn(2, 3, |t, i| f64::from(u8::from(i == 2 - t)));
        let e = time_dependent_tokens(&m, &h).unwrap();
        assert_eq!(e.row(0), h.row(2));
        assert_eq!(e.row(1), h.row(1));
    }

    #[test]
    fn uniform_weights_average_tokens() {
        let h = Tensor::randn(4, 3, 1.0, &mut rng(8));
        let e = time_dependent_tokens(&uniform_weights(5, 4), &h).unwrap();
        for t in 0..5 {
            for c in 0..3 {
                let mean = (0..4).map(|i| h.get(i, c)).sum::<f64>() / 4.0;
                assert!((e.get(t, c) - mean).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn mixing_matches_triple_loop() {
        let m = softmax_rows(&Tensor::randn(5, 3, 1.0, &mut rng(9)));
        let h = Tensor::randn(3, 4, 1.0, &mut rng(10));
        let e = time_dependent_tokens(&m, &h).unwrap();
        for t in 0..5 {
            for c in 0..4 {
                let mut s = 0.0;
                for i in 0..3 {
                    s += m.get(t, i) * h.get(i, c);
                }
                assert!((e.get(t, c) - s).abs() < 1e-12);
            }
        }
        assert!(time_dependent_tokens(&m, &Tensor::zeros(4, 4)).is_err());
    }

    #[test]
    fn constant_speaker_gives_window_count() {
        let s = Tensor::filled(12, MOTION_DIMS, 0.7);
        let w = speaker_motion_weight(&s, 5).unwrap();
        assert!(w.data().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn ramp_reaches_closed_form_steady_state() {
        let s = Tensor::from_fn(20, MOTION_DIMS, |t, c| if c == 3 { 0.1 * t as f64 } else { 0.0 });
        let w = speaker_motion_weight(&s, 5).unwrap();
        // Row t covers diffs at i = t-5..t-1; all are real diffs once t >= 6.
        for t in 6..20 {
            assert!((w.get(t, 3) - 5.0 * 0.1f64.exp()).abs() < 1e-12);
            assert!((w.get(t, 3) - 5.525_854_590_378_2).abs() < 1e-9);
        }
        assert_eq!(w.get(0, 3), 5.0);
        assert!((w.get(2, 3) - (4.0 + 0.1f64.exp())).abs() < 1e-12);
    }

    #[test]
    fn large_jumps_are_clamped() {
        let mut s = Tensor::zeros(8, MOTION_DIMS);
        for t in 4..8 {
            s.set(t, 0, 50.0);
        }
        let w = speaker_motion_weight(&s, 5).unwrap();
        assert!(w.is_finite());
        assert!((w.get(5, 0) - (4.0 + 10f64.exp())).abs() < 1e-9);
        assert!(speaker_motion_weight(&s, 0).is_err());
    }

    #[test]
    fn identity_projection_passes_tokens_through() {
        let mut store = ParamStore::new();
        let dp = DynamicProjection::new(&mut store, "dyn", C, &mut rng(11));
        *store.value_mut(dp.proj.w) = Tensor::from_fn(C + MOTION_DIMS, C, |r, c| f64::from(u8::from(r == c)));
        store.value_mut(dp.proj.b).scale_assign(0.0);
        let e = Tensor::randn(6, C, 1.0, &mut rng(12));
        let ebar = Tensor::randn(6, MOTION_DIMS, 1.0, &mut rng(13));
        assert_eq!(dp.dynamic_tokens(&store, &e, &ebar).unwrap(), e);

        // Complement: tokens ignored, a linear image of Ebar remains.
        *store.value_mut(dp.proj.w) = Tensor::from_fn(C + MOTION_DIMS, C, |r, c| f64::from(u8::from(r == C + c)));
        let d = dp.dynamic_tokens(&store, &Tensor::zeros(6, C), &ebar).unwrap();
        assert_eq!(d, ebar.slice_cols(0, C));
        assert!(dp.dynamic_tokens(&store, &e, &ebar.slice_rows(0, 5)).is_err());
    }

    #[test]
    fn projection_gradients_match_finite_differences() {
        let mut store = ParamStore::new();
        let dp = DynamicProjection::new(&mut store, "dyn", C, &mut rng(14));
        let e = Tensor::randn(3, C, 1.0, &mut rng(15));
        let ebar = speaker_motion_weight(&Tensor::randn(3, MOTION_DIMS, 0.2, &mut rng(16)), 5).unwrap();
        let proj = Tensor::randn(3, C, 1.0, &mut rng(17));
        let r = grad_check_params(
            &store,
            |g| {
                let (ev, bv) = (g.constant(e.clone()), g.constant(ebar.clone()));
                let d = dp.forward(g, ev, bv)?;
                g.weighted_sum(d, proj.clone())
            },
            &[dp.proj.w, dp.proj.b],
            usize::MAX,
            1e-6,
        )
        .unwrap();
        assert!(r.passed(), "max rel err {}", r.max_rel_err);
    }

    proptest! {
        #[test]
        fn weight_rows_are_distributions_and_tokens_stay_in_hull(
            seed in 0u64..10_000, t in 1usize..8, l in 1usize..6, scale in 0.1f64..20.0
        ) {
            let mut r = rng(seed);
            let m = responsive_weights(&Tensor::randn(t, C, scale, &mut r), &Tensor::randn(l, C, scale, &mut r)).unwrap();
            for row in 0..t {
                let s: f64 = m.row(row).iter().sum();
                prop_assert!((s - 1.0).abs() <= 1e-9);
                prop_assert!(m.row(row).iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
            let h = Tensor::randn(l, C, 1.0, &mut r);
            let e = time_dependent_tokens(&m, &h).unwrap();
            for c in 0..C {
                let col = h.column(c);
                let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                for row in 0..t {
                    prop_assert!(e.get(row, c) >= lo - 1e-12 && e.get(row, c) <= hi + 1e-12);
                }
            }
        }

        #[test]
        fn motion_weight_is_causal_and_bounded(seed in 0u64..10_000, t in 0usize..15, w in 1usize..8) {
            let mut r = rng(seed);
            let s = Tensor::randn(15, MOTION_DIMS, 3.0, &mut r);
            let mut s2 = s.clone();
            for c in 0..MOTION_DIMS {
                s2.set(t, c, s.get(t, c) + 100.0);
            }
            let (a, b) = (speaker_motion_weight(&s, w).unwrap(), speaker_motion_weight(&s2, w).unwrap());
            for row in 0..=t {
                prop_assert_eq!(a.row(row), b.row(row));
            }
            let hi = w as f64 * DIFF_CLAMP.exp();
            prop_assert!(a.data().iter().all(|&v| v >= w as f64 && v <= hi * (1.0 + 1e-12)));
        }
    }
}
