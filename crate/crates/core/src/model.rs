//! The full listener model: text and audio conditioning, past-guided prior,
//! condition fusion and the denoiser, sharing one parameter store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{self, Denoiser, DenoiserConfig, NoiseSchedule, ScheduleConfig};
use crate::error::{Error, Result};
use crate::motion::MOTION_DIMS;
use crate::nn::checkpoint::{self, NamedTensor};
use crate::nn::layers::Linear;
use crate::nn::{Graph, ParamStore, Tensor, Var};
use crate::pgg::prior_on_graph;
use crate::portrait::{MappingNet, TextEmbedder};
use crate::sdp::{speaker_motion_weight, uniform_weights, AudioEncoder, DynamicProjection, ResponsiveInteraction, ACOUSTIC_DIMS};

pub const META_ENTRY: &str = "__meta__.dims";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub dim: usize,
    pub audio_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub ffn: usize,
    pub segment_len: usize,
    pub window: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { dim: 64, audio_layers: 2, decoder_layers: 4, heads: 4, ffn: 256, segment_len: 60, window: 5 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.dim == 0 || self.heads == 0 || self.ffn == 0 || self.decoder_layers == 0 {
            return bad("model dim, heads, ffn and decoder_layers must be positive".into());
        }
        if self.dim % self.heads != 0 {
            return bad(format!("dim {} is not divisible by heads {}", self.dim, self.heads));
        }
        if self.dim % 2 != 0 {
            return bad(format!("dim {} must be even for sinusoidal positions", self.dim));
        }
        if self.segment_len < 2 || self.window == 0 {
            return bad("segment_len must be at least 2 and window positive".into());
        }
        Ok(())
    }

    fn fields(&self, steps: usize) -> [(&'static str, usize); 8] {
        [
            ("dim", self.dim),
            ("audio_layers", self.audio_layers),
            ("decoder_layers", self.decoder_layers),
            ("heads", self.heads),
            ("ffn", self.ffn),
            ("segment_len", self.segment_len),
            ("window", self.window),
            ("steps", steps),
        ]
    }
}

/// Inference-time switches for ablations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    /// Replace the audio-text responsive weights with uniform weights.
    pub uniform_responsive: bool,
    /// Replace the whole condition sequence with zeros.
    pub zero_condition: bool,
}

/// Noise scale below which the noise estimate passes the input through.
pub const SKIP_SIGMA: f64 = 0.1;

/// Weights `(a_x, a_f)` of `eps_hat = a_x·x + a_f·f(x)` at cumulative alpha `ab`.
fn noise_coefficients(ab: f64) -> (f64, f64) {
    let s2 = (1.0 - ab) / ab;
    let n2 = SKIP_SIGMA * SKIP_SIGMA;
    let c_skip = n2 / (s2 + n2);
    let c_out = s2.sqrt() / (s2 + n2).sqrt();
    ((1.0 - c_skip) / (1.0 - ab).sqrt(), -c_out / s2.sqrt())
}

/// Per-segment conditioning inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentInputs {
    /// `L x 45`.
    pub audio: Tensor,
    /// Speaker motion amplitude, `L x 70`.
    pub ebar: Tensor,
}

/// Cuts a sequence's audio and speaker motion into consecutive segments. The
/// motion amplitude is computed over the whole sequence, so its window looks
/// back across segment boundaries.
pub fn segment_inputs(audio: &Tensor, speaker: &Tensor, segment_len: usize, window: usize) -> Result<Vec<SegmentInputs>> {
    if audio.rows() != speaker.rows() {
        return Err(Error::LengthMismatch { left: audio.rows(), right: speaker.rows() });
    }
    let ebar = speaker_motion_weight(speaker, window)?;
    let n = audio.rows() / segment_len;
    Ok((0..n)
        .map(|s| SegmentInputs {
            audio: audio.slice_rows(s * segment_len, segment_len),
            ebar: ebar.slice_rows(s * segment_len, segment_len),
        })
        .collect())
}

#[derive(Clone, Debug)]
pub struct ListenerModel {
    pub config: ModelConfig,
    pub schedule_config: ScheduleConfig,
    pub schedule: NoiseSchedule,
    pub store: ParamStore,
    pub embedder: TextEmbedder,
    pub mapping: MappingNet,
    pub audio: AudioEncoder,
    pub responsive: ResponsiveInteraction,
    pub dynamic: DynamicProjection,
    pub fusion: Linear,
    pub denoiser: Denoiser,
}

impl ListenerModel {
    pub fn new(config: ModelConfig, schedule_config: ScheduleConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let schedule = NoiseSchedule::from_config(&schedule_config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = config.dim;
        let embedder = TextEmbedder::new(&mut store, "text", c, &mut rng);
        let mapping = MappingNet::new(&mut store, "mapping", c, &mut rng);
        let audio = AudioEncoder::new(&mut store, "audio", c, config.audio_layers, config.heads, config.ffn, &mut rng);
        let responsive = ResponsiveInteraction::new(&mut store, "responsive", c, &mut rng);
        let dynamic = DynamicProjection::new(&mut store, "dynamic", c, &mut rng);
        let fusion = Linear::new(&mut store, "fusion", c + MOTION_DIMS, c, &mut rng);
        let den_cfg = DenoiserConfig { dim: c, layers: config.decoder_layers, heads: config.heads, ffn: config.ffn };
        let denoiser = Denoiser::new(&mut store, "denoiser", den_cfg, &mut rng);
        Ok(Self {
            config,
            schedule_config,
            schedule,
            store,
            embedder,
            mapping,
            audio,
            responsive,
            dynamic,
            fusion,
            denoiser,
        })
    }

    /// Static portrait tokens for a tokenized text prior, `L x C`.
    pub fn static_tokens_on(&self, g: &mut Graph, ids: &[usize]) -> Result<Var> {
        let emb = self.embedder.forward(g, ids)?;
        self.mapping.forward(g, emb)
    }

    /// Dynamic portrait tokens for one segment, `L_seg x C`.
    pub fn dynamic_tokens_on(&self, g: &mut Graph, h: Var, seg: &SegmentInputs, ablation: Ablation) -> Result<Var> {
        if seg.audio.cols() != ACOUSTIC_DIMS || seg.ebar.cols() != MOTION_DIMS || seg.audio.rows() != seg.ebar.rows() {
            return Err(Error::ShapeMismatch {
                op: "segment inputs",
                detail: format!("audio {:?}, motion weight {:?}", seg.audio.shape(), seg.ebar.shape()),
            });
        }
        let m = if ablation.uniform_responsive {
            g.constant(uniform_weights(seg.audio.rows(), g.shape(h)[0]))
        } else {
            let feats = g.constant(seg.audio.clone());
            let a = self.audio.forward(g, feats)?;
            self.responsive.forward(g, a, h)?
        };
        let e = g.matmul(m, h)?;
        let ebar = g.constant(seg.ebar.clone());
        self.dynamic.forward(g, e, ebar)
    }

    /// Cross-attention memory from dynamic tokens and the motion prior.
    pub fn condition_on(&self, g: &mut Graph, d: Var, prior: Var) -> Result<Var> {
        let cat = g.concat_cols(&[d, prior])?;
        let c = self.fusion.forward(g, cat)?;
        Ok(g.positional(c))
    }

    /// Condition for `cur`. With `prev = Some((inputs, motion))` the prior is
    /// built from the previous segment's tokens and motion; otherwise it is zero.
    pub fn condition(
        &self,
        ids: &[usize],
        cur: &SegmentInputs,
        prev: Option<(&SegmentInputs, &Tensor)>,
        ablation: Ablation,
    ) -> Result<Tensor> {
        let len = cur.audio.rows();
        if ablation.zero_condition {
            return Ok(Tensor::zeros(len, self.config.dim));
        }
        let mut g = Graph::new(&self.store);
        let h = self.static_tokens_on(&mut g, ids)?;
        let d = self.dynamic_tokens_on(&mut g, h, cur, ablation)?;
        let prior = match prev {
            Some((p_in, p_motion)) => {
                let dp = self.dynamic_tokens_on(&mut g, h, p_in, ablation)?;
                let past = g.constant(p_motion.clone());
                prior_on_graph(&mut g, d, dp, past)?
            }
            None => g.constant(Tensor::zeros(len, MOTION_DIMS)),
        };
        let c = self.condition_on(&mut g, d, prior)?;
        Ok(g.value(c).clone())
    }

    /// Noise estimate from the denoiser network `f`. With `s^2 = (1-ab)/ab`
    /// the clean-motion estimate is `c_skip·x/sqrt(ab) + c_out·f(x)` where
    /// `c_skip = n^2/(s^2+n^2)`, `c_out = s/sqrt(s^2+n^2)` and `n` is
    /// [`SKIP_SIGMA`]; the noise estimate follows from it. Above the floor `n`
    /// the network predicts clean motion, below it the input is passed through.
    pub fn noise_on(&self, g: &mut Graph, x: Var, cond: Var, k: usize) -> Result<Var> {
        let (a_x, a_f) = noise_coefficients(self.schedule.alpha_bar()[k]);
        let net = self.denoiser.forward(g, x, cond, k)?;
        let net = g.scale(net, a_f);
        let skip = g.scale(x, a_x);
        g.add(skip, net)
    }

    pub fn predict_noise(&self, x: &Tensor, cond: &Tensor, k: usize) -> Result<Tensor> {
        self.schedule.check(k)?;
        let mut g = Graph::new(&self.store);
        let (xv, cv) = (g.constant(x.clone()), g.constant(cond.clone()));
        let out = self.noise_on(&mut g, xv, cv, k)?;
        Ok(g.value(out).clone())
    }

    /// Reverse chain for one segment with step noises drawn from `rng`.
    pub fn sample(&self, cond: &Tensor, init: &Tensor, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let pred = |x: &Tensor, k: usize| self.predict_noise(x, cond, k);
        diffusion::generate_segment(&pred, init, &self.schedule, rng)
    }

    /// Training loss graph for segment `seg` of a sequence. Segment 0 gets a
    /// zero prior; later segments use the ground-truth previous motion.
    #[allow(clippy::too_many_arguments)]
    pub fn loss_on(
        &self,
        g: &mut Graph,
        ids: &[usize],
        cur: &SegmentInputs,
        prev: Option<(&SegmentInputs, &Tensor)>,
        x0: &Tensor,
        k: usize,
        eps: &Tensor,
    ) -> Result<Var> {
        let h = self.static_tokens_on(g, ids)?;
        let d = self.dynamic_tokens_on(g, h, cur, Ablation::default())?;
        let prior = match prev {
            Some((p_in, p_motion)) => {
                let dp = self.dynamic_tokens_on(g, h, p_in, Ablation::default())?;
                let past = g.constant(p_motion.clone());
                prior_on_graph(g, d, dp, past)?
            }
            None => g.constant(Tensor::zeros(x0.rows(), MOTION_DIMS)),
        };
        let cond = self.condition_on(g, d, prior)?;
        let xk = g.constant(diffusion::q_sample(x0, k, eps, &self.schedule)?);
        let pred = self.noise_on(g, xk, cond, k)?;
        g.mse(pred, eps.clone())
    }

    pub fn checkpoint_entries(&self) -> Vec<NamedTensor> {
        let mut entries = checkpoint::store_entries(&self.store);
        let fields = self.config.fields(self.schedule_config.steps);
        entries.push(NamedTensor {
            name: META_ENTRY.into(),
            shape: vec![1, fields.len()],
            data: fields.iter().map(|(_, v)| *v as f64).collect(),
        });
        entries
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        checkpoint::save(path, &self.checkpoint_entries())
    }

    /// Loads weights into a freshly built model after checking the recorded
    /// dimensions against `config` field by field.
    pub fn load(path: &std::path::Path, config: ModelConfig, schedule_config: ScheduleConfig) -> Result<Self> {
        let entries = checkpoint::load(path)?;
        Self::from_entries(entries, config, schedule_config)
    }

    pub fn from_entries(entries: Vec<NamedTensor>, config: ModelConfig, schedule_config: ScheduleConfig) -> Result<Self> {
        let meta = entries
            .iter()
            .find(|e| e.name == META_ENTRY)
            .ok_or_else(|| Error::MalformedCheckpoint("missing dimension record".into()))?;
        let want = config.fields(schedule_config.steps);
        if meta.data.len() != want.len() {
            return Err(Error::MalformedCheckpoint(format!(
                "dimension record has {} fields, expected {}",
                meta.data.len(),
                want.len()
            )));
        }
        let problems: Vec<String> = want
            .iter()
            .zip(&meta.data)
            .filter(|((_, v), got)| *v as f64 != **got)
            .map(|((name, v), got)| format!("{name}: checkpoint {got}, config {v}"))
            .collect();
        if !problems.is_empty() {
            return Err(Error::CheckpointIncompatible(problems));
        }
        let mut model = Self::new(config, schedule_config, 0)?;
        let entries = entries.into_iter().filter(|e| e.name != META_ENTRY).collect();
        let extra = checkpoint::restore(&mut model.store, entries)?;
        if !extra.is_empty() {
            let names = extra.into_iter().map(|e| format!("{}: not a model parameter", e.name)).collect();
            return Err(Error::CheckpointIncompatible(names));
        }
        Ok(model)
    }
}

/// Segment-by-segment generation request for one sequence.
#[derive(Clone, Debug)]
pub struct GenerationPlan {
    pub token_ids: Vec<usize>,
    pub segments: Vec<SegmentInputs>,
    /// Number of leading initial-noise frames copied from the previous
    /// segment's trailing frames.
    pub boundary_overlap: usize,
    pub master_seed: u64,
    pub use_prior: bool,
    pub share_noise: bool,
    pub ablation: Ablation,
}

#[derive(Clone, Debug)]
pub struct GenerationOutput {
    /// Concatenated segments, `(n L) x 70`.
    pub motion: Tensor,
    pub segments: Vec<Tensor>,
    pub conditions: Vec<Tensor>,
    pub init_noise: Vec<Tensor>,
}

/// Initial noise for segment `index`: stream `index` of the master seed.
/// The same RNG continues into the step noises.
pub fn segment_rng(master_seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(index as u64);
    rng
}

/// First segment of a plan's noise stream and its initial noise, with the
/// boundary rows overwritten when `shared` is given.
pub fn segment_noise(master_seed: u64, index: usize, len: usize, shared: Option<&Tensor>, overlap: usize) -> (ChaCha8Rng, Tensor) {
    let mut rng = segment_rng(master_seed, index);
    let mut init = Tensor::randn(len, MOTION_DIMS, 1.0, &mut rng);
    if let Some(prev) = shared {
        let start = prev.rows() - overlap;
        for r in 0..overlap {
            init.row_mut(r).copy_from_slice(prev.row(start + r));
        }
    }
    (rng, init)
}

pub fn generate_long(model: &ListenerModel, plan: &GenerationPlan) -> Result<GenerationOutput> {
    if plan.segments.is_empty() {
        return Err(Error::EmptySequence);
    }
    let len = plan.segments[0].audio.rows();
    if plan.boundary_overlap >= len {
        return Err(Error::InvalidConfig(format!(
            "boundary overlap {} must be below the segment length {len}",
            plan.boundary_overlap
        )));
    }
    let mut segments: Vec<Tensor> = Vec::with_capacity(plan.segments.len());
    let mut init_noise: Vec<Tensor> = Vec::with_capacity(plan.segments.len());
    let mut conditions: Vec<Tensor> = Vec::with_capacity(plan.segments.len());
    for (i, seg) in plan.segments.iter().enumerate() {
        if seg.audio.rows() != len {
            return Err(Error::LengthMismatch { left: len, right: seg.audio.rows() });
        }
        let prev = if i > 0 && plan.use_prior { Some((&plan.segments[i - 1], &segments[i - 1])) } else { None };
        let cond = model.condition(&plan.token_ids, seg, prev, plan.ablation)?;
        let shared = if i > 0 && plan.share_noise { init_noise.last() } else { None };
        let (mut rng, init) = segment_noise(plan.master_seed, i, len, shared, plan.boundary_overlap);
        segments.push(model.sample(&cond, &init, &mut rng)?);
        init_noise.push(init);
        conditions.push(cond);
    }
    let parts: Vec<&Tensor> = segments.iter().collect();
    let motion = Tensor::concat_rows(&parts)?;
    Ok(GenerationOutput { motion, segments, conditions, init_noise })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::grad_check_params;
    use crate::text::{render_text_prior, AuActivation, ListenerAnnotation};
    use rand::Rng;

    pub(crate) fn tiny_config() -> (ModelConfig, ScheduleConfig) {
        (
            ModelConfig { dim: 8, audio_layers: 1, decoder_layers: 1, heads: 2, ffn: 16, segment_len: 6, window: 2 },
            ScheduleConfig { steps: 10, ..Default::default() },
        )
    }

    fn ids(model: &ListenerModel) -> Vec<usize> {
        let ann = ListenerAnnotation {
            emotion: "happy".into(),
            aus: vec![AuActivation { id: 12, level: 3 }],
            head_motion: None,
        };
        model.embedder.vocab.tokenize(&render_text_prior(&ann, 5).unwrap().text).unwrap()
    }

    fn inputs(len: usize, seed: u64) -> SegmentInputs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SegmentInputs {
            audio: Tensor::randn(len, ACOUSTIC_DIMS, 1.0, &mut rng),
            ebar: Tensor::randn(len, MOTION_DIMS, 1.0, &mut rng).map(|v| v.abs() + 1.0),
        }
    }

    #[test]
    fn condition_shapes_and_ablations() {
        let (mc, sc) = tiny_config();
        let m = ListenerModel::new(mc, sc, 1).unwrap();
        let ids = ids(&m);
        let (a, b) = (inputs(6, 1), inputs(6, 2));
        let past = Tensor::randn(6, MOTION_DIMS, 1.0, &mut ChaCha8Rng::seed_from_u64(3));
        let c0 = m.condition(&ids, &b, None, Ablation::default()).unwrap();
        let c1 = m.condition(&ids, &b, Some((&a, &past)), Ablation::default()).unwrap();
        assert_eq!(c0.shape(), [6, 8]);
        assert!(c0.max_abs_diff(&c1) > 1e-9);
        let u = m.condition(&ids, &b, None, Ablation { uniform_responsive: true, ..Default::default() }).unwrap();
        assert!(u.max_abs_diff(&c0) > 1e-9);
        let z = m.condition(&ids, &b, Some((&a, &past)), Ablation { zero_condition: true, ..Default::default() }).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn uniform_ablation_ignores_audio() {
        let (mc, sc) = tiny_config();
        let m = ListenerModel::new(mc, sc, 2).unwrap();
        let ids = ids(&m);
        let a = inputs(6, 4);
        let mut b = a.clone();
        b.audio = Tensor::randn(6, ACOUSTIC_DIMS, 3.0, &mut ChaCha8Rng::seed_from_u64(9));
        let ab = Ablation { uniform_responsive: true, ..Default::default() };
        assert_eq!(m.condition(&ids, &a, None, ab).unwrap(), m.condition(&ids, &b, None, ab).unwrap());
        assert_ne!(m.condition(&ids, &a, None, Ablation::default()).unwrap(), m.condition(&ids, &b, None, Ablation::default()).unwrap());
    }

    #[test]
    fn noise_coefficients_recover_the_noise_from_an_exact_clean_estimate() {
        // If f returns x0 exactly, eps_hat must equal the true noise wherever
        // the skip weight vanishes; in general eps_hat = eps + a_f·(f - target).
        for ab in [0.9999, 0.99, 0.9, 0.5, 0.1, 0.006] {
            let (a_x, a_f) = noise_coefficients(ab);
            let (x0, eps) = (0.7, -1.3);
            let x = ab.sqrt() * x0 + (1.0 - ab).sqrt() * eps;
            // Clean estimate c_skip·x/sqrt(ab) + c_out·f equals x0 for this f.
            let s2 = (1.0 - ab) / ab;
            let n2 = SKIP_SIGMA * SKIP_SIGMA;
            let (c_skip, c_out) = (n2 / (s2 + n2), (s2 / (s2 + n2)).sqrt());
            let f = (x0 - c_skip * x / ab.sqrt()) / c_out;
            assert!((a_x * x + a_f * f - eps).abs() < 1e-9, "ab {ab}");
        }
    }

    #[test]
    fn end_to_end_gradient_check() {
        // Two-frame toy through every component.
        let (mut mc, sc) = tiny_config();
        mc.segment_len = 2;
        for seed in 0..5u64 {
            let m = ListenerModel::new(mc, sc, seed).unwrap();
            let ids = ids(&m);
            let (a, b) = (inputs(2, seed + 10), inputs(2, seed + 20));
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let past = Tensor::randn(2, MOTION_DIMS, 1.0, &mut rng);
            let x0 = Tensor::randn(2, MOTION_DIMS, 1.0, &mut rng);
            let eps = Tensor::randn(2, MOTION_DIMS, 1.0, &mut rng);
            let k = rng.random_range(0..sc.steps);
            let ids_all: Vec<_> = m.store.ids().collect();
            let report = grad_check_params(
                &m.store,
                |g| m.loss_on(g, &ids, &b, Some((&a, &past)), &x0, k, &eps),
                &ids_all,
                6,
                1e-5,
            )
            .unwrap();
            assert!(report.passed(), "seed {seed}: {report:?}");
        }
    }

    #[test]
    fn single_segment_plan_is_generate_segment_with_zero_prior() {
        let (mc, sc) = tiny_config();
        let m = ListenerModel::new(mc, sc, 3).unwrap();
        let ids = ids(&m);
        let seg = inputs(6, 5);
        let plan = GenerationPlan {
            token_ids: ids.clone(),
            segments: vec![seg.clone()],
            boundary_overlap: 2,
            master_seed: 11,
            use_prior: true,
            share_noise: true,
            ablation: Ablation::default(),
        };
        let out = generate_long(&m, &plan).unwrap();
        let cond = m.condition(&ids, &seg, None, Ablation::default()).unwrap();
        let (mut rng, init) = segment_noise(11, 0, 6, None, 0);
        let direct = m.sample(&cond, &init, &mut rng).unwrap();
        assert_eq!(out.motion, direct);
        assert!(out.motion.is_finite());
    }

    #[test]
    fn boundary_noise_is_shared_and_generation_is_deterministic() {
        let (mc, sc) = tiny_config();
        let m = ListenerModel::new(mc, sc, 4).unwrap();
        let mut plan = GenerationPlan {
            token_ids: ids(&m),
            segments: vec![inputs(6, 6), inputs(6, 7), inputs(6, 8)],
            boundary_overlap: 2,
            master_seed: 5,
            use_prior: true,
            share_noise: true,
            ablation: Ablation::default(),
        };
        let a = generate_long(&m, &plan).unwrap();
        let b = generate_long(&m, &plan).unwrap();
        assert_eq!(a.motion, b.motion);
        assert_eq!(a.motion.shape(), [18, MOTION_DIMS]);
        for i in 1..3 {
            assert_eq!(a.init_noise[i].slice_rows(0, 2), a.init_noise[i - 1].slice_rows(4, 2));
            assert_eq!(a.init_noise[i].slice_rows(2, 4), segment_noise(5, i, 6, None, 0).1.slice_rows(2, 4));
        }
        plan.share_noise = false;
        let c = generate_long(&m, &plan).unwrap();
        assert_eq!(c.segments[0], a.segments[0]);
        assert_ne!(c.init_noise[1].slice_rows(0, 2), a.init_noise[0].slice_rows(4, 2));
        plan.boundary_overlap = 6;
        assert!(generate_long(&m, &plan).is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_dimension_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let (mc, sc) = tiny_config();
        let m = ListenerModel::new(mc, sc, 6).unwrap();
        m.save(&path).unwrap();
        let back = ListenerModel::load(&path, mc, sc).unwrap();
        for (id, p) in m.store.iter() {
            assert_eq!(&p.value, back.store.value(id));
        }
        let mut wider = mc;
        wider.dim = 12;
        wider.ffn = 20;
        match ListenerModel::load(&path, wider, sc) {
            Err(Error::CheckpointIncompatible(p)) => {
                assert_eq!(p, vec!["dim: checkpoint 8, config 12".to_string(), "ffn: checkpoint 16, config 20".to_string()]);
            }
            other => panic!("{other:?}"),
        }
        let steps = ScheduleConfig { steps: 20, ..sc };
        assert!(matches!(ListenerModel::load(&path, mc, steps), Err(Error::CheckpointIncompatible(_))));
    }

    #[test]
    fn segment_inputs_cut_whole_segments() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let audio = Tensor::randn(130, ACOUSTIC_DIMS, 1.0, &mut rng);
        let spk = Tensor::randn(130, MOTION_DIMS, 1.0, &mut rng);
        let segs = segment_inputs(&audio, &spk, 60, 5).unwrap();
        assert_eq!(segs.len(), 2);
        let ebar = speaker_motion_weight(&spk, 5).unwrap();
        assert_eq!(segs[1].ebar, ebar.slice_rows(60, 60));
        assert_eq!(segs[1].audio, audio.slice_rows(60, 60));
    }
}
