//! Minibatch training of [`ListenerModel`] on paired sequences.
//!
//! Each training item is one segment of one pair. Segment 0 is trained with
//! a zero prior, later segments with the prior built from the ground-truth
//! previous segment. The text prior is re-rendered with a fresh synonym seed
//! for every item. All randomness derives from `seed`, the epoch and the
//! item's position, so results do not depend on the thread count.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{segment_inputs, ListenerModel, SegmentInputs};
use crate::nn::{AdamW, AdamWConfig, Graph, ParamId, Tensor};
use crate::synth::StoredPair;
use crate::text::{render_text_prior, ListenerAnnotation};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Stop after this many optimizer steps, if set.
    pub max_steps: Option<usize>,
    pub lr_schedule: LrSchedule,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine from `lr` to zero over the planned number of steps.
    Cosine,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 0.01,
            batch: 8,
            epochs: 5,
            seed: 0,
            max_steps: None,
            lr_schedule: LrSchedule::Constant,
        }
    }
}

impl TrainConfig {
    /// Optimizer steps a full run takes for `items` training items.
    pub fn planned_steps(&self, items: usize) -> usize {
        let total = self.epochs * items.div_ceil(self.batch.max(1));
        self.max_steps.map_or(total, |m| m.min(total))
    }

    /// Learning rate for optimizer step `step` of `planned`.
    pub fn lr_at(&self, step: usize, planned: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => {
                let frac = step.min(planned) as f64 / planned.max(1) as f64;
                0.5 * self.lr * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::InvalidConfig("batch must be at least 1".into()));
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidConfig("lr must be positive and weight_decay non-negative".into()));
        }
        Ok(())
    }
}

/// One pair cut into segments.
#[derive(Clone, Debug)]
pub struct TrainExample {
    pub annotation: ListenerAnnotation,
    pub inputs: Vec<SegmentInputs>,
    pub motion: Vec<Tensor>,
}

pub fn prepare_examples(pairs: &[StoredPair], segment_len: usize, window: usize) -> Result<Vec<TrainExample>> {
    pairs
        .iter()
        .map(|p| {
            let inputs = segment_inputs(p.acoustic.frames(), p.speaker.frames(), segment_len, window)?;
            let motion = (0..inputs.len())
                .map(|s| p.listener.frames().slice_rows(s * segment_len, segment_len))
                .collect();
            Ok(TrainExample { annotation: p.annotation.clone(), inputs, motion })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub samples: usize,
    pub steps: usize,
}

fn item_rng(seed: u64, epoch: usize, position: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 32) | position as u64);
    rng
}

/// Loss and parameter gradients for one item.
fn item_gradients(
    model: &ListenerModel,
    ex: &TrainExample,
    seg: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, Vec<(ParamId, Tensor)>)> {
    let text = render_text_prior(&ex.annotation, rng.random())?.text;
    let ids = model.embedder.vocab.tokenize(&text)?;
    let x0 = &ex.motion[seg];
    let k = rng.random_range(0..model.schedule.steps());
    let eps = Tensor::randn(x0.rows(), x0.cols(), 1.0, rng);
    let prev = (seg > 0).then(|| (&ex.inputs[seg - 1], &ex.motion[seg - 1]));
    let mut g = Graph::new(&model.store);
    let loss = model.loss_on(&mut g, &ids, &ex.inputs[seg], prev, x0, k, &eps)?;
    let value = g.value(loss).get(0, 0);
    let grads = g.backward(loss)?;
    Ok((value, grads.params().map(|(id, t)| (id, t.clone())).collect()))
}

pub struct Trainer {
    pub config: TrainConfig,
    pub optimizer: AdamW,
    items: Vec<(usize, usize)>,
}

impl Trainer {
    pub fn new(config: TrainConfig, examples: &[TrainExample]) -> Result<Self> {
        config.validate()?;
        let items: Vec<(usize, usize)> = examples
            .iter()
            .enumerate()
            .flat_map(|(i, ex)| (0..ex.inputs.len()).map(move |s| (i, s)))
            .collect();
        if items.is_empty() {
            return Err(Error::InsufficientSamples("no whole segments in the training set".into()));
        }
        let optimizer = AdamW::new(AdamWConfig { lr: config.lr, weight_decay: config.weight_decay, ..Default::default() });
        Ok(Self { config, optimizer, items })
    }

    pub fn items(&self) -> usize {
        self.items.len()
    }

    /// Runs one epoch and returns its statistics; `None` once `max_steps` is
    /// reached before the epoch starts.
    pub fn run_epoch(&mut self, model: &mut ListenerModel, examples: &[TrainExample], epoch: usize) -> Result<Option<EpochStats>> {
        let limit = self.config.max_steps.unwrap_or(usize::MAX);
        if self.optimizer.steps_taken() as usize >= limit {
            return Ok(None);
        }
        let mut order = self.items.clone();
        order.shuffle(&mut item_rng(self.config.seed, epoch, usize::MAX >> 32));
        let (mut total, mut samples, mut steps) = (0.0, 0, 0);
        for (b, batch) in order.chunks(self.config.batch).enumerate() {
            if self.optimizer.steps_taken() as usize >= limit {
                break;
            }
            let base = b * self.config.batch;
            let results: Vec<Result<(f64, Vec<(ParamId, Tensor)>)>> = batch
                .par_iter()
                .enumerate()
                .map(|(j, &(i, s))| item_gradients(model, &examples[i], s, &mut item_rng(self.config.seed, epoch, base + j)))
                .collect();
            model.store.zero_grad();
            let planned = self.config.planned_steps(self.items.len());
            self.optimizer.config.lr = self.config.lr_at(self.optimizer.steps_taken() as usize, planned);
            let scale = 1.0 / batch.len() as f64;
            for r in results {
                let (loss, grads) = r?;
                if !loss.is_finite() {
                    return Err(Error::NumericFailure(format!("training loss became {loss} in epoch {epoch}")));
                }
                total += loss;
                for (id, g) in grads {
                    model.store.get_mut(id).grad.add_scaled(&g, scale);
                }
            }
            self.optimizer.step(&mut model.store);
            samples += batch.len();
            steps += 1;
        }
        Ok(Some(EpochStats { epoch, mean_loss: total / samples.max(1) as f64, samples, steps }))
    }
}

/// Trains for `config.epochs` epochs, calling `on_epoch` after each.
pub fn train(
    model: &mut ListenerModel,
    examples: &[TrainExample],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<Vec<EpochStats>> {
    let mut trainer = Trainer::new(config.clone(), examples)?;
    let mut out = Vec::new();
    for epoch in 0..config.epochs {
        match trainer.run_epoch(model, examples, epoch)? {
            Some(stats) => {
                on_epoch(&stats);
                out.push(stats);
            }
            None => break,
        }
    }
    Ok(out)
}
