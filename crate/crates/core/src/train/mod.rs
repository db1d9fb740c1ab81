//! Training: batch construction, scores, losses and the optimization loop.

pub mod batch;
pub mod loss;

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use batch::{build_batch, class_budget, TrainingBatch};
pub use loss::{bce_loss, cross_entropy_loss, loss_on_tape, score, LossConfig, LossKind, NegativeWeight};

use crate::data::{DataError, Dataset, Split};
use crate::label::{LabelEncoderKind, LabelError};
use crate::model::{Model, ModelError};
use crate::nn::checkpoint::{save_store, write_atomic};
use crate::nn::init::derive_seed;
use crate::nn::{AdamW, AdamWConfig, Mat, NnError, Precision, Tape, Var, WarmupCosine};
use crate::video::{sample_frames, SampleMode, TapCache, VideoError};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("batch positives exceed class budget: {positives} positive labels for a budget of {budget}; raise the batch size or cap labels per video")]
    ClassBudget { positives: usize, budget: usize },
    #[error("single-label loss needs exactly one positive per video, found {0}")]
    SingleLabel(usize),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite loss at step {step}; last good checkpoint: {}", last_good.as_ref().map_or("none".to_string(), |p| p.display().to_string()))]
    NonFiniteLoss { step: u64, last_good: Option<PathBuf> },
    #[error("label encoder ran {got} times for {expected} distinct labels")]
    EncodeCount { expected: usize, got: usize },
    #[error("io: {0}")]
    Io(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Label(#[from] LabelError),
    #[error(transparent)]
    Video(#[from] VideoError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub weight_decay: f64,
    pub eval_every: u64,
    pub checkpoint_every: u64,
    pub loss: LossConfig,
    pub precision: Precision,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 4,
            base_lr: 3e-4,
            warmup_steps: 100,
            weight_decay: 1e-7,
            eval_every: 500,
            checkpoint_every: 500,
            loss: LossConfig::default(),
            precision: Precision::F64,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        self.loss.validate()?;
        if self.steps == 0 || self.batch_size == 0 {
            return Err(TrainError::Config("steps and batch size must be positive".into()));
        }
        if !(self.base_lr > 0.0) {
            return Err(TrainError::Config(format!("learning rate must be positive, got {}", self.base_lr)));
        }
        Ok(())
    }

    pub fn schedule(&self) -> WarmupCosine {
        WarmupCosine {
            base_lr: self.base_lr,
            warmup_steps: self.warmup_steps,
            total_steps: self.steps,
        }
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    /// Mean training loss since the previous record.
    pub loss: f64,
    pub lr: f64,
    /// Per evaluated split: `{"aupr": …, "peak_f1": …}`.
    pub eval: serde_json::Map<String, serde_json::Value>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepStats {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

/// Periodic evaluation hook: returns per-split metrics for the log.
pub type EvalHook<'a> = dyn FnMut(&Model, &TapCache) -> Result<serde_json::Map<String, serde_json::Value>, TrainError> + 'a;

/// Training state over a model and a dataset.
pub struct Trainer<'a> {
    pub model: Model,
    pub dataset: &'a Dataset,
    pub config: TrainConfig,
    pub cache: TapCache,
    optimizer: AdamW,
    vocabulary: Vec<String>,
    train_videos: Vec<usize>,
    train_labels: Vec<Vec<usize>>,
    frames: HashMap<usize, Vec<Mat>>,
    step: u64,
}

impl<'a> Trainer<'a> {
    pub fn new(model: Model, dataset: &'a Dataset, config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let vocabulary = dataset.split_vocabulary(Split::Train);
        let index: HashMap<&str, usize> = vocabulary.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
        let mut train_videos = Vec::new();
        let mut train_labels = Vec::new();
        for (i, r) in dataset.records.iter().enumerate().filter(|(_, r)| r.split == Split::Train) {
            train_videos.push(i);
            let labels = r
                .labels
                .iter()
                .map(|l| index.get(l.as_str()).copied().ok_or_else(|| DataError::UnknownLabel(l.clone())))
                .collect::<Result<Vec<_>, _>>()?;
            train_labels.push(labels);
        }
        if train_videos.len() < config.batch_size {
            return Err(TrainError::Config(format!("{} training videos for batch size {}", train_videos.len(), config.batch_size)));
        }
        let optimizer = AdamW::new(AdamWConfig {
            weight_decay: config.weight_decay,
            ..AdamWConfig::default()
        });
        Ok(Self {
            model,
            dataset,
            config,
            cache: TapCache::new(),
            optimizer,
            vocabulary,
            train_videos,
            train_labels,
            frames: HashMap::new(),
            step: 0,
        })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn vocabulary(&self) -> &[String] {
        &self.vocabulary
    }

    fn frames_of(&mut self, record: usize) -> Result<(), TrainError> {
        if !self.frames.contains_key(&record) {
            let f = self.dataset.frames(&self.dataset.records[record])?;
            self.frames.insert(record, f);
        }
        Ok(())
    }

    /// Stream of randomness for one step: batch, frame jitter and α.
    pub fn step_rng(&self, step: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, &format!("step.{step}")))
    }

    /// Builds the batch of `step` and the loss node on `tape`.
    pub fn forward_loss(&mut self, tape: &Tape, step: u64) -> Result<(TrainingBatch, Var), TrainError> {
        let mut rng = self.step_rng(step);
        let batch = build_batch(&self.train_labels, self.vocabulary.len(), self.config.batch_size, &mut rng)?;
        for &v in &batch.videos {
            self.frames_of(self.train_videos[v])?;
        }
        let m = &self.model;
        let labels: Vec<String> = batch.pool.iter().map(|&l| self.vocabulary[l].clone()).collect();
        let before = m.label.encode_calls();
        let feats = m.label.encode_labels(tape, &m.store, &m.backbones, &labels)?;
        let got = m.label.encode_calls() - before;
        if got != labels.len() {
            return Err(TrainError::EncodeCount {
                expected: labels.len(),
                got,
            });
        }
        let f = m.video.config.frames_per_clip;
        let mut clips = Vec::with_capacity(batch.videos.len());
        for &v in &batch.videos {
            let frames = &self.frames[&self.train_videos[v]];
            let idx = sample_frames(frames.len(), f, 1, SampleMode::Train, &mut rng)?;
            clips.push(vec![idx[0].iter().map(|&i| &frames[i]).collect::<Vec<_>>()]);
        }
        let alphas = m.video.alphas(m.video.config.swa.mode, &mut rng)?;
        let cache = if m.store.get(m.backbones.vision.projection).trainable { None } else { Some(&self.cache) };
        let videos = m.video.encode_videos(tape, &m.store, &m.backbones, &clips, &alphas, cache)?;
        let tau = self.config.loss.temperature;
        let s_pos = tape.matmul_t(videos, feats.pos);
        let logits = match (m.label.kind(), feats.neg) {
            (LabelEncoderKind::Dualcoop, Some(neg)) => {
                let s_neg = tape.matmul_t(videos, neg);
                tape.axpby(1.0 / tau, s_pos, -1.0 / tau, s_neg)
            }
            _ => tape.scale(s_pos, 1.0 / tau),
        };
        let mut loss = loss_on_tape(tape, logits, &batch.targets(), &self.config.loss)?;
        if let Some(p) = m.video.anchor_penalty(tape, &m.store) {
            loss = tape.add(loss, p);
        }
        Ok((batch, loss))
    }

    /// One optimizer step. Leaves parameters untouched when the loss or any
    /// gradient is non-finite.
    pub fn train_step(&mut self) -> Result<StepStats, TrainError> {
        let step = self.step;
        let tape = Tape::new(self.config.precision);
        let (_, loss) = match self.forward_loss(&tape, step) {
            Ok(x) => x,
            // NaN/inf caught by an activation guard inside an encoder; the
            // error arrives wrapped, so match on the forwarded message.
            Err(e) if e.to_string().starts_with("non-finite activations") => {
                return Err(TrainError::NonFiniteLoss { step, last_good: None });
            }
            Err(e) => return Err(e),
        };
        let value = tape.scalar(loss);
        let grads = tape.backward(loss)?;
        if !value.is_finite() || grads.params().any(|(_, g)| !g.is_finite()) {
            return Err(TrainError::NonFiniteLoss { step, last_good: None });
        }
        let lr = self.config.schedule().lr(step);
        self.optimizer.step(&mut self.model.store, &grads, lr)?;
        self.step += 1;
        Ok(StepStats { step, loss: value, lr })
    }

    /// Runs the remaining steps. With `out_dir`, writes `metrics.jsonl` and
    /// checkpoints (`checkpoints/step_N.ckpt` plus `last_good.ckpt`). A
    /// trainer that already took steps appends and keeps the existing
    /// `last_good.ckpt` as its fallback.
    pub fn run(&mut self, out_dir: Option<&Path>, mut eval: Option<&mut EvalHook<'_>>) -> Result<Vec<MetricsRecord>, TrainError> {
        let io = |e: std::io::Error| TrainError::Io(e.to_string());
        let mut log = match out_dir {
            Some(d) => {
                fs::create_dir_all(d.join("checkpoints")).map_err(io)?;
                // A resumed run appends to its log.
                let f = fs::OpenOptions::new()
                    .create(true)
                    .write(true)
                    .append(self.step > 0)
                    .truncate(self.step == 0)
                    .open(d.join("metrics.jsonl"))
                    .map_err(io)?;
                Some(f)
            }
            None => None,
        };
        let mut last_good: Option<PathBuf> = out_dir.map(|d| d.join("last_good.ckpt")).filter(|p| self.step > 0 && p.exists());
        let mut records = Vec::new();
        let (mut loss_sum, mut loss_n) = (0.0, 0u64);
        while self.step < self.config.steps {
            let stats = match self.train_step() {
                Ok(s) => s,
                Err(TrainError::NonFiniteLoss { step, .. }) => {
                    log::error!("non-finite loss at step {step}; keeping {:?}", last_good);
                    return Err(TrainError::NonFiniteLoss { step, last_good });
                }
                Err(e) => return Err(e),
            };
            loss_sum += stats.loss;
            loss_n += 1;
            let done = self.step;
            let at_eval = done % self.config.eval_every.max(1) == 0 || done == self.config.steps;
            if at_eval {
                let evals = match eval.as_mut() {
                    Some(h) => h(&self.model, &self.cache)?,
                    None => serde_json::Map::new(),
                };
                let rec = MetricsRecord {
                    step: done,
                    loss: loss_sum / loss_n as f64,
                    lr: stats.lr,
                    eval: evals,
                };
                log::info!("step {done} loss {:.4} lr {:.2e}", rec.loss, rec.lr);
                if let Some(f) = log.as_mut() {
                    writeln!(f, "{}", serde_json::to_string(&rec).expect("record serializes")).map_err(io)?;
                    f.flush().map_err(io)?;
                }
                records.push(rec);
                (loss_sum, loss_n) = (0.0, 0);
            }
            if let Some(d) = out_dir {
                if done % self.config.checkpoint_every.max(1) == 0 || done == self.config.steps {
                    let p = d.join("checkpoints").join(format!("step_{done}.ckpt"));
                    save_store(&self.model.store, &p)?;
                    let lg = d.join("last_good.ckpt");
                    write_atomic(&lg, &fs::read(&p).map_err(io)?)?;
                    last_good = Some(lg);
                }
            }
        }
        Ok(records)
    }
}

#[cfg(test)]
mod tests;
