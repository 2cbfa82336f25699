//! Synthetic speaker/listener pairs with known couplings.
//!
//! The speaker is a low-rank motion: a few latent Gaussian random walks,
//! smoothed with a moving average and mixed into 70 coefficients by a fixed
//! matrix. The listener echoes the speaker `lag` frames later with gain
//! `gain`, plus a per-emotion offset, a per-pair habit on a few coefficients
//! and white noise. Acoustic features are a fixed affine image of the speaker
//! frame plus noise. Everything shared across pairs (mixing matrices, emotion
//! offsets) derives from `world_seed`; everything per pair from `seed`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::{self, MotionSequence, DEFAULT_FPS, MOTION_DIMS};
use crate::nn::Tensor;
use crate::sdp::{AcousticFeatures, ACOUSTIC_DIMS};
use crate::text::{self, AuActivation, HeadMotion, ListenerAnnotation, ACTION_UNITS, EMOTIONS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub world_seed: u64,
    pub frames: usize,
    pub lag: usize,
    pub gain: f64,
    pub latent_dims: usize,
    pub walk_std: f64,
    pub smooth_window: usize,
    pub habit_dims: Vec<usize>,
    pub habit_amplitude: f64,
    /// Habit modulation period in frames.
    pub habit_period: f64,
    /// Explicit per-label offsets; when absent they are drawn from
    /// `world_seed` with standard deviation `emotion_scale`.
    pub emotion_offsets: Option<BTreeMap<String, Vec<f64>>>,
    pub emotion_scale: f64,
    pub noise_std: f64,
    pub acoustic_noise_std: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            world_seed: 0,
            frames: 120,
            lag: 3,
            gain: 1.0,
            latent_dims: 4,
            walk_std: 0.15,
            smooth_window: 5,
            habit_dims: vec![10, 11, 12, 13],
            habit_amplitude: 0.8,
            habit_period: 40.0,
            emotion_offsets: None,
            emotion_scale: 0.5,
            noise_std: 0.05,
            acoustic_noise_std: 0.05,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.frames == 0 {
            return bad("frames must be positive".into());
        }
        if self.lag >= self.frames {
            return bad(format!("lag {} must be below frames {}", self.lag, self.frames));
        }
        if !(self.gain >= 0.0) || !(self.noise_std >= 0.0) || !(self.acoustic_noise_std >= 0.0) {
            return bad("gain and noise levels must be non-negative".into());
        }
        if self.latent_dims == 0 || self.smooth_window == 0 {
            return bad("latent_dims and smooth_window must be positive".into());
        }
        if !(self.habit_period > 0.0) {
            return bad("habit_period must be positive".into());
        }
        if let Some(&d) = self.habit_dims.iter().find(|&&d| d >= MOTION_DIMS) {
            return bad(format!("habit dim {d} outside 0..{MOTION_DIMS}"));
        }
        if let Some(map) = &self.emotion_offsets {
            for e in &EMOTIONS {
                match map.get(e.label) {
                    Some(v) if v.len() == MOTION_DIMS => {}
                    Some(v) => return bad(format!("offset for {} has {} values", e.label, v.len())),
                    None => return bad(format!("missing offset for {}", e.label)),
                }
            }
            if let Some(k) = map.keys().find(|k| !text::emotion_labels().any(|l| l == *k)) {
                return bad(format!("offset for unknown emotion {k}"));
            }
        }
        Ok(())
    }
}

/// Quantities shared by every pair generated from the same `world_seed`.
#[derive(Clone, Debug)]
pub struct World {
    /// `latent_dims x 70`.
    pub mixing: Tensor,
    /// `70 x 45`.
    pub acoustic_weight: Tensor,
    pub acoustic_bias: Tensor,
    pub emotion_offsets: BTreeMap<String, Vec<f64>>,
}

impl World {
    pub fn new(cfg: &SynthConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.world_seed);
        let k = cfg.latent_dims;
        let mixing = Tensor::randn(k, MOTION_DIMS, 1.0 / (k as f64).sqrt(), &mut rng);
        let acoustic_weight = Tensor::randn(MOTION_DIMS, ACOUSTIC_DIMS, 1.0 / (MOTION_DIMS as f64).sqrt(), &mut rng);
        let acoustic_bias = Tensor::randn(1, ACOUSTIC_DIMS, 0.1, &mut rng);
        let emotion_offsets = match &cfg.emotion_offsets {
            Some(m) => m.clone(),
            None => EMOTIONS
                .iter()
                .map(|e| {
                    let v = Tensor::randn(1, MOTION_DIMS, cfg.emotion_scale, &mut rng).into_data();
                    (e.label.to_string(), v)
                })
                .collect(),
        };
        Self { mixing, acoustic_weight, acoustic_bias, emotion_offsets }
    }
}

#[derive(Clone, Debug)]
pub struct SynthPair {
    pub speaker: MotionSequence,
    pub acoustic: AcousticFeatures,
    pub listener: MotionSequence,
    pub annotation: ListenerAnnotation,
    /// Habit component of the listener, `T x 70`, zero outside the habit dims.
    pub habit: Tensor,
}

pub fn gen_pair(cfg: &SynthConfig) -> Result<SynthPair> {
    cfg.validate()?;
    gen_pair_in(&World::new(cfg), cfg, cfg.seed)
}

fn random_annotation(rng: &mut ChaCha8Rng) -> ListenerAnnotation {
    let emotion = EMOTIONS[rng.random_range(0..EMOTIONS.len())].label.to_string();
    let count = rng.random_range(0..=3usize);
    let mut ids: Vec<usize> = (0..ACTION_UNITS.len()).collect();
    let mut aus = Vec::with_capacity(count);
    for _ in 0..count {
        let i = ids.swap_remove(rng.random_range(0..ids.len()));
        aus.push(AuActivation { id: ACTION_UNITS[i].id, level: rng.random_range(1..=5) });
    }
    let head_motion = match rng.random_range(0..3) {
        0 => None,
        1 => Some(HeadMotion::Nod),
        _ => Some(HeadMotion::Shake),
    };
    ListenerAnnotation { emotion, aus, head_motion }
}

pub fn gen_pair_in(world: &World, cfg: &SynthConfig, seed: u64) -> Result<SynthPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (t_len, lag, k) = (cfg.frames, cfg.lag, cfg.latent_dims);
    let annotation = random_annotation(&mut rng);

    // Latent walk of length T + lag: the listener at t sees walk[t], the
    // speaker at t sees walk[t + lag].
    let n = t_len + lag;
    let steps = Tensor::randn(n, k, cfg.walk_std, &mut rng);
    let mut walk = Tensor::zeros(n, k);
    for t in 1..n {
        for j in 0..k {
            walk.set(t, j, walk.get(t - 1, j) + steps.get(t, j));
        }
    }
    let w = cfg.smooth_window;
    let smooth = Tensor::from_fn(n, k, |t, j| {
        let lo = t.saturating_sub(w - 1);
        (lo..=t).map(|i| walk.get(i, j)).sum::<f64>() / (t - lo + 1) as f64
    });
    let motion = smooth.matmul(&world.mixing);
    let speaker = motion.slice_rows(lag, t_len);

    let mut acoustic = speaker.matmul(&world.acoustic_weight);
    let noise = Tensor::randn(t_len, ACOUSTIC_DIMS, cfg.acoustic_noise_std, &mut rng);
    for t in 0..t_len {
        for c in 0..ACOUSTIC_DIMS {
            acoustic.set(t, c, acoustic.get(t, c) + world.acoustic_bias.get(0, c) + noise.get(t, c));
        }
    }

    let mut habit = Tensor::zeros(t_len, MOTION_DIMS);
    for &d in &cfg.habit_dims {
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        for t in 0..t_len {
            let m = 1.0 + 0.5 * (std::f64::consts::TAU * t as f64 / cfg.habit_period + phase).sin();
            habit.set(t, d, sign * cfg.habit_amplitude * m);
        }
    }

    let offset = world
        .emotion_offsets
        .get(&annotation.emotion)
        .ok_or_else(|| Error::UnknownEmotion(annotation.emotion.clone()))?;
    let noise = Tensor::randn(t_len, MOTION_DIMS, cfg.noise_std, &mut rng);
    let listener = Tensor::from_fn(t_len, MOTION_DIMS, |t, c| {
        cfg.gain * motion.get(t, c) + offset[c] + habit.get(t, c) + noise.get(t, c)
    });

    Ok(SynthPair {
        speaker: MotionSequence::new(speaker, DEFAULT_FPS)?,
        acoustic: AcousticFeatures::new(acoustic)?,
        listener: MotionSequence::new(listener, DEFAULT_FPS)?,
        annotation,
        habit,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub index: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config: SynthConfig,
    pub seed: u64,
    pub pairs: Vec<PairRecord>,
}

/// Per-pair seeds drawn from the dataset seed.
pub fn pair_seeds(seed: u64, n: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random()).collect()
}

pub fn gen_pairs(template: &SynthConfig, n_pairs: usize, seed: u64) -> Result<Vec<SynthPair>> {
    template.validate()?;
    let world = World::new(template);
    pair_seeds(seed, n_pairs)
        .into_iter()
        .map(|s| gen_pair_in(&world, template, s))
        .collect()
}

fn pair_path(dir: &Path, index: usize, kind: &str) -> PathBuf {
    dir.join("pairs").join(format!("{index:04}.{kind}.bin"))
}

/// Writes `n_pairs` pairs under `dir`:
/// `pairs/NNNN.{spk,lst,aud}.bin`, `annotations.jsonl` and `manifest.json`.
pub fn gen_dataset(template: &SynthConfig, n_pairs: usize, seed: u64, dir: &Path) -> Result<DatasetManifest> {
    if n_pairs == 0 {
        return Err(Error::InvalidConfig("n_pairs must be at least 1".into()));
    }
    template.validate()?;
    let world = World::new(template);
    fs::create_dir_all(dir.join("pairs"))?;
    let mut ann = BufWriter::new(fs::File::create(dir.join("annotations.jsonl"))?);
    let mut records = Vec::with_capacity(n_pairs);
    for (index, s) in pair_seeds(seed, n_pairs).into_iter().enumerate() {
        let p = gen_pair_in(&world, template, s)?;
        motion::save_motion_sequence(&p.speaker, &pair_path(dir, index, "spk"), motion::MotionFormat::Binary)?;
        motion::save_motion_sequence(&p.listener, &pair_path(dir, index, "lst"), motion::MotionFormat::Binary)?;
        motion::save_matrix(&pair_path(dir, index, "aud"), p.acoustic.frames(), DEFAULT_FPS)?;
        serde_json::to_writer(&mut ann, &p.annotation)?;
        writeln!(ann)?;
        records.push(PairRecord { index, seed: s });
    }
    ann.flush()?;
    let manifest = DatasetManifest { config: template.clone(), seed, pairs: records };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// A pair as stored on disk (no habit component).
#[derive(Clone, Debug)]
pub struct StoredPair {
    pub speaker: MotionSequence,
    pub acoustic: AcousticFeatures,
    pub listener: MotionSequence,
    pub annotation: ListenerAnnotation,
}

impl From<SynthPair> for StoredPair {
    fn from(p: SynthPair) -> Self {
        Self { speaker: p.speaker, acoustic: p.acoustic, listener: p.listener, annotation: p.annotation }
    }
}

pub fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join("manifest.json");
    if !path.is_file() {
        return Err(Error::DatasetMissing(dir.to_path_buf()));
    }
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

pub fn load_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<StoredPair>)> {
    let manifest = load_manifest(dir)?;
    let file = BufReader::new(fs::File::open(dir.join("annotations.jsonl"))?);
    let annotations: Vec<ListenerAnnotation> = file
        .lines()
        .filter(|l| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|l| Ok(serde_json::from_str(&l?)?))
        .collect::<Result<_>>()?;
    if annotations.len() != manifest.pairs.len() {
        return Err(Error::LengthMismatch { left: manifest.pairs.len(), right: annotations.len() });
    }
    let mut pairs = Vec::with_capacity(annotations.len());
    for (rec, annotation) in manifest.pairs.iter().zip(annotations) {
        let i = rec.index;
        let speaker = motion::load_motion_sequence(&pair_path(dir, i, "spk"), motion::MotionFormat::Binary)?;
        let listener = motion::load_motion_sequence(&pair_path(dir, i, "lst"), motion::MotionFormat::Binary)?;
        let (aud, _) = motion::load_matrix(&pair_path(dir, i, "aud"), ACOUSTIC_DIMS)?;
        pairs.push(StoredPair { speaker, acoustic: AcousticFeatures::new(aud)?, listener, annotation });
    }
    Ok((manifest, pairs))
}
