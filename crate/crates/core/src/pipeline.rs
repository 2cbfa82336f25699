//! Reproducible runs driven by one JSON config: dataset synthesis, training,
//! generation, evaluation and annotation rendering. Every command writes a
//! `run-<command>.json` manifest next to its outputs with the effective
//! config, its hash, the seeds used and content hashes of inputs and outputs.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::ScheduleConfig;
use crate::error::{Error, Result};
use crate::metrics::{evaluate, MetricConfig, MetricReport};
use crate::model::{generate_long, segment_inputs, Ablation, GenerationPlan, ListenerModel, ModelConfig};
use crate::motion::{self, MotionFormat, MotionSequence, DEFAULT_FPS};
use crate::nn::Tensor;
use crate::synth::{self, gen_dataset, load_dataset, pair_seeds, SynthConfig};
use crate::text::{render_text_prior, ListenerAnnotation};
use crate::train::{prepare_examples, Trainer, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub pairs: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { pairs: 200, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    pub seed: u64,
    pub boundary_overlap: usize,
    pub use_prior: bool,
    pub share_noise: bool,
    pub ablation: Ablation,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self { seed: 0, boundary_overlap: 10, use_prior: true, share_noise: true, ablation: Ablation::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub dataset: PathBuf,
    /// Dataset to generate for; the training dataset when absent.
    pub eval_dataset: Option<PathBuf>,
    pub checkpoint: PathBuf,
    pub predictions: PathBuf,
    pub metrics: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            dataset: "data".into(),
            eval_dataset: None,
            checkpoint: "model/model.ckpt".into(),
            predictions: "predictions".into(),
            metrics: "metrics".into(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub data: DataConfig,
    pub generation: GenerationConfig,
    pub metrics: MetricConfig,
    pub paths: Paths,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::InvalidConfig(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        crate::diffusion::NoiseSchedule::from_config(&self.schedule)?;
        self.train.validate()?;
        self.synth.validate()?;
        if self.generation.boundary_overlap >= self.model.segment_len {
            return Err(Error::InvalidConfig(format!(
                "boundary_overlap {} must be below segment_len {}",
                self.generation.boundary_overlap, self.model.segment_len
            )));
        }
        if self.metrics.window == 0 || self.metrics.stride == 0 {
            return Err(Error::InvalidConfig("metric window and stride must be positive".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the compact JSON of the effective config.
    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn is_run_manifest(path: &Path) -> bool {
    path.file_name()
        .and_then(|n| n.to_str())
        .is_some_and(|n| n.starts_with("run-") && n.ends_with(".json"))
}

/// Content hash of a file, or of a directory's files (relative paths and
/// contents, sorted). Run manifests inside a directory are skipped.
pub fn hash_path(path: &Path) -> Result<String> {
    if path.is_file() {
        return Ok(sha256_hex(&fs::read(path)?));
    }
    let mut files = Vec::new();
    let mut stack = vec![path.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir)? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
            } else if !is_run_manifest(&p) {
                files.push(p);
            }
        }
    }
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        let rel = f.strip_prefix(path).unwrap_or(&f).to_string_lossy().replace('\\', "/");
        h.update(rel.as_bytes());
        h.update([0]);
        h.update(sha256_hex(&fs::read(&f)?).as_bytes());
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub config: RunConfig,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub details: serde_json::Value,
}

impl RunManifest {
    fn new(command: &str, config: &RunConfig) -> Self {
        Self {
            command: command.into(),
            config_hash: config.hash(),
            config: config.clone(),
            seeds: BTreeMap::new(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            details: serde_json::Value::Null,
        }
    }

    fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.insert(path.display().to_string(), hash_path(path)?);
        Ok(())
    }

    fn output(&mut self, path: &Path) -> Result<()> {
        self.outputs.insert(path.display().to_string(), hash_path(path)?);
        Ok(())
    }

    fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(format!("run-{}.json", self.command));
        fs::write(&path, serde_json::to_string_pretty(self)?)?;
        Ok(path)
    }
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

pub fn cmd_synth(cfg: &RunConfig) -> Result<RunManifest> {
    let dir = &cfg.paths.dataset;
    let ds = gen_dataset(&cfg.synth, cfg.data.pairs, cfg.data.seed, dir)?;
    let mut m = RunManifest::new("synth", cfg);
    m.seeds.insert("dataset".into(), cfg.data.seed);
    m.seeds.insert("world".into(), cfg.synth.world_seed);
    m.output(dir)?;
    m.details = serde_json::json!({ "pairs": ds.pairs.len() });
    m.write(dir)?;
    Ok(m)
}

pub const LOSS_HEADER: &str = "epoch,mean_loss,samples,steps";

pub fn loss_csv_path(checkpoint: &Path) -> PathBuf {
    parent_dir(checkpoint).join("loss.csv")
}

pub fn cmd_train(cfg: &RunConfig) -> Result<RunManifest> {
    let (_, pairs) = load_dataset(&cfg.paths.dataset)?;
    let examples = prepare_examples(&pairs, cfg.model.segment_len, cfg.model.window)?;
    let mut model = ListenerModel::new(cfg.model, cfg.schedule, cfg.train.seed)?;
    let out_dir = parent_dir(&cfg.paths.checkpoint);
    fs::create_dir_all(&out_dir)?;
    let loss_path = loss_csv_path(&cfg.paths.checkpoint);
    let mut csv = BufWriter::new(fs::File::create(&loss_path)?);
    writeln!(csv, "{LOSS_HEADER}")?;
    let mut trainer = Trainer::new(cfg.train.clone(), &examples)?;
    log::info!(
        "training on {} segments from {} pairs, {} parameters",
        trainer.items(),
        pairs.len(),
        model.store.num_scalars()
    );
    for epoch in 0..cfg.train.epochs {
        let Some(s) = trainer.run_epoch(&mut model, &examples, epoch)? else { break };
        log::info!("epoch {epoch}: loss {:.5} over {} samples", s.mean_loss, s.samples);
        writeln!(csv, "{},{},{},{}", s.epoch, s.mean_loss, s.samples, s.steps)?;
        csv.flush()?;
    }
    csv.flush()?;
    drop(csv);
    model.save(&cfg.paths.checkpoint)?;
    let mut m = RunManifest::new("train", cfg);
    m.seeds.insert("train".into(), cfg.train.seed);
    m.input(&cfg.paths.dataset)?;
    m.output(&cfg.paths.checkpoint)?;
    m.output(&loss_path)?;
    m.details = serde_json::json!({ "optimizer_steps": trainer.optimizer.steps_taken() });
    m.write(&out_dir)?;
    Ok(m)
}

fn prediction_path(dir: &Path, index: usize) -> PathBuf {
    dir.join("pairs").join(format!("{index:04}.lst.bin"))
}

fn tensor_hash(t: &Tensor) -> String {
    let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    sha256_hex(&bytes)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratedPair {
    pub index: usize,
    pub master_seed: u64,
    pub text: String,
    /// `(start_frame, length)` per segment.
    pub segments: Vec<(usize, usize)>,
    pub dropped_frames: usize,
    pub condition_hashes: Vec<String>,
}

pub fn cmd_generate(cfg: &RunConfig, checkpoint: &Path) -> Result<RunManifest> {
    if !checkpoint.is_file() {
        return Err(Error::DatasetMissing(checkpoint.to_path_buf()));
    }
    let model = ListenerModel::load(checkpoint, cfg.model, cfg.schedule)?;
    let data_dir = cfg.paths.eval_dataset.as_ref().unwrap_or(&cfg.paths.dataset);
    let (_, pairs) = load_dataset(data_dir)?;
    let out = &cfg.paths.predictions;
    fs::create_dir_all(out.join("pairs"))?;
    let len = cfg.model.segment_len;
    let seeds = pair_seeds(cfg.generation.seed, pairs.len());
    let mut records = Vec::with_capacity(pairs.len());
    for (index, (pair, &seed)) in pairs.iter().zip(&seeds).enumerate() {
        let text = render_text_prior(&pair.annotation, seed)?.text;
        let ids = model.embedder.vocab.tokenize(&text)?;
        let segments = segment_inputs(pair.acoustic.frames(), pair.speaker.frames(), len, cfg.model.window)?;
        if segments.is_empty() {
            return Err(Error::TooShort { needed: len, found: pair.speaker.len() });
        }
        let n = segments.len();
        let plan = GenerationPlan {
            token_ids: ids,
            segments,
            boundary_overlap: cfg.generation.boundary_overlap,
            master_seed: seed,
            use_prior: cfg.generation.use_prior,
            share_noise: cfg.generation.share_noise,
            ablation: cfg.generation.ablation,
        };
        let gen = generate_long(&model, &plan)?;
        let seq = MotionSequence::new(gen.motion, DEFAULT_FPS)?;
        motion::save_motion_sequence(&seq, &prediction_path(out, index), MotionFormat::Binary)?;
        records.push(GeneratedPair {
            index,
            master_seed: seed,
            text,
            segments: (0..n).map(|s| (s * len, len)).collect(),
            dropped_frames: pair.speaker.len() - n * len,
            condition_hashes: gen.conditions.iter().map(tensor_hash).collect(),
        });
        log::debug!("generated pair {index}");
    }
    let mut m = RunManifest::new("generate", cfg);
    m.seeds.insert("generation".into(), cfg.generation.seed);
    m.input(checkpoint)?;
    m.input(data_dir)?;
    m.output(&out.join("pairs"))?;
    m.details = serde_json::json!({
        "schedule": cfg.schedule,
        "segment_len": len,
        "boundary_overlap": cfg.generation.boundary_overlap,
        "pairs": records,
    });
    m.write(out)?;
    Ok(m)
}

/// Evaluates `pred_dir/pairs/NNNN.lst.bin` against the dataset in `gt_dir`.
/// Ground truth is cut to the prediction length when generation dropped a
/// trailing partial segment.
pub fn cmd_evaluate(pred_dir: &Path, gt_dir: &Path, out_dir: &Path, config: &MetricConfig) -> Result<MetricReport> {
    let (_, pairs) = load_dataset(gt_dir)?;
    let (mut preds, mut gts, mut spks) = (Vec::new(), Vec::new(), Vec::new());
    for (i, p) in pairs.into_iter().enumerate() {
        let path = prediction_path(pred_dir, i);
        if !path.is_file() {
            return Err(Error::DatasetMissing(path));
        }
        let pred = motion::load_motion_sequence(&path, MotionFormat::Binary)?;
        if pred.len() > p.listener.len() {
            return Err(Error::LengthMismatch { left: pred.len(), right: p.listener.len() });
        }
        gts.push(p.listener.slice(0, pred.len())?);
        spks.push(p.speaker.slice(0, pred.len())?);
        preds.push(pred);
    }
    let report = evaluate(&preds, &gts, &spks, config)?;
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("metrics.json"), serde_json::to_string_pretty(&report)?)?;
    fs::write(out_dir.join("metrics.csv"), report.table_csv())?;
    let mut m = RunManifest::new("evaluate", &RunConfig { metrics: config.clone(), ..Default::default() });
    m.input(&pred_dir.join("pairs"))?;
    m.input(gt_dir)?;
    m.output(&out_dir.join("metrics.json"))?;
    m.output(&out_dir.join("metrics.csv"))?;
    m.write(out_dir)?;
    Ok(report)
}

/// Renders one text prior per annotation line; line `i` uses seed `seed + i`.
pub fn cmd_annotate(input: &Path, output: &Path, seed: u64) -> Result<usize> {
    let reader = BufReader::new(fs::File::open(input).map_err(|_| Error::DatasetMissing(input.to_path_buf()))?);
    let mut w = BufWriter::new(fs::File::create(output)?);
    let mut count = 0;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ann: ListenerAnnotation = serde_json::from_str(&line)?;
        let prior = render_text_prior(&ann, seed.wrapping_add(i as u64))?;
        serde_json::to_writer(&mut w, &prior)?;
        writeln!(w)?;
        count += 1;
    }
    w.flush()?;
    Ok(count)
}

/// Loads every prediction in a directory written by [`cmd_generate`].
pub fn load_predictions(dir: &Path, count: usize) -> Result<Vec<MotionSequence>> {
    (0..count)
        .map(|i| motion::load_motion_sequence(&prediction_path(dir, i), MotionFormat::Binary))
        .collect()
}

pub use synth::load_manifest as load_dataset_manifest;
