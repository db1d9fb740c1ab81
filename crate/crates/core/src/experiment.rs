//! Train-then-evaluate runs over the synthetic dataset, shared by the CLI
//! and the end-to-end checks.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::config::RunConfig;
use crate::data::{DataError, Dataset, Split};
use crate::inference::{evaluate_split, InferenceError};
use crate::metrics::{aupr_of, peak_f1, MetricsError, ScoredPairSet};
use crate::model::{Model, ModelError};
use crate::train::{MetricsRecord, TrainError, Trainer};
use crate::label::LabelError;
use crate::nn::{finite_diff_grad_check, seeded_normal, top_gradient_coords, GradCheckReport, NnError, ParamId, Tape, Var};
use crate::video::{SwaMode, TapCache, VideoError};

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Label(#[from] LabelError),
    #[error(transparent)]
    Video(#[from] VideoError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("{0}")]
    Setup(String),
}

/// Micro metrics over every (video, label) pair of a split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub pairs: usize,
    pub prevalence: f64,
    pub aupr: f64,
    pub peak_f1: f64,
    pub peak_threshold: f64,
}

pub fn split_metrics(set: &ScoredPairSet) -> Result<SplitMetrics, MetricsError> {
    let scored = set.scored();
    let (f1, thr) = peak_f1(&scored)?;
    Ok(SplitMetrics {
        pairs: scored.len(),
        prevalence: set.prevalence(),
        aupr: aupr_of(&scored)?,
        peak_f1: f1,
        peak_threshold: thr,
    })
}

/// Pairs of the temporal concepts only.
pub fn temporal_subset(set: &ScoredPairSet, dataset: &Dataset) -> ScoredPairSet {
    let temporal = dataset.temporal_labels();
    set.filter_labels(|l| temporal.contains(l))
}

pub fn build_dataset(cfg: &RunConfig) -> Result<Dataset, DataError> {
    Dataset::synthetic(&cfg.data, cfg.data_seed)
}

/// Cache of frozen-backbone activations, when the vision tower is frozen.
pub fn tap_cache_for<'c>(model: &Model, cache: &'c TapCache) -> Option<&'c TapCache> {
    (!model.store.get(model.backbones.vision.projection).trainable).then_some(cache)
}

pub struct TrainedRun {
    pub model: Model,
    pub cache: TapCache,
    pub log: Vec<MetricsRecord>,
}

/// Trains a fresh model. Every eval record carries validation AUPR and
/// Peak F1.
pub fn train(cfg: &RunConfig, dataset: &Dataset, out_dir: Option<&Path>) -> Result<TrainedRun, ExperimentError> {
    let model = Model::new(cfg.model.clone())?;
    let mut trainer = Trainer::new(model, dataset, cfg.train.clone())?;
    let precision = cfg.eval.precision;
    let mut hook = |m: &Model, cache: &TapCache| -> Result<Map<String, Value>, TrainError> {
        let set = evaluate_split(m, dataset, Split::Val, precision, tap_cache_for(m, cache)).map_err(|e| TrainError::Config(e.to_string()))?;
        let mut out = Map::new();
        match split_metrics(&set) {
            Ok(s) => {
                out.insert("val".into(), json!({"aupr": s.aupr, "peak_f1": s.peak_f1}));
            }
            Err(e) => log::warn!("validation metrics unavailable: {e}"),
        }
        Ok(out)
    };
    let log = trainer.run(out_dir, Some(&mut hook))?;
    Ok(TrainedRun {
        model: trainer.model,
        cache: trainer.cache,
        log,
    })
}

impl TrainedRun {
    pub fn evaluate(&self, dataset: &Dataset, split: Split, cfg: &RunConfig) -> Result<ScoredPairSet, ExperimentError> {
        Ok(evaluate_split(&self.model, dataset, split, cfg.eval.precision, tap_cache_for(&self.model, &self.cache))?)
    }
}

/// Finite-difference step of the gradient suite.
pub const GRADCHECK_EPSILON: f64 = 1e-5;
/// Coordinates checked per parameter, chosen by gradient magnitude.
pub const GRADCHECK_COORDS: usize = 4;

/// One checked parameter of the gradient suite.
#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub component: &'static str,
    pub report: GradCheckReport,
}

/// Central-difference checks, 64-bit, of an LLM prefix and a prompt
/// transformer weight through label encoding, and of a temporal-attention
/// and a fusion-projection weight through video encoding with α = λ/2.
pub fn gradcheck_suite(cfg: &RunConfig) -> Result<Vec<GradCheckEntry>, ExperimentError> {
    let mut mc = cfg.model.clone();
    mc.label.kind = crate::label::LabelEncoderKind::LearnableLlm;
    mc.video.enabled = true;
    mc.video.blocks = mc.video.blocks.max(1);
    let mut model = Model::new(mc)?;
    // Fusion starts at zero; move it so every branch path carries signal.
    for (i, b) in model.video.blocks.clone().iter().enumerate() {
        let (r, c) = model.store.values(b.proj_spatial.weight).shape();
        model.store.overwrite(b.proj_spatial.weight, seeded_normal(r, c, 17 + i as u64, 0.05))?;
    }
    let model = model;
    let dataset = build_dataset(cfg)?;
    let labels: Vec<String> = dataset.vocabulary.iter().take(2).cloned().collect();
    let label_target = seeded_normal(labels.len(), model.backbones.config.joint_dim, 5, 1.0);
    let label_loss = |t: &Tape| -> Result<Var, ExperimentError> {
        let f = model.label.encode_labels(t, &model.store, &model.backbones, &labels)?;
        Ok(t.sum_all(t.mul(f.pos, t.constant(label_target.clone()))))
    };
    let frames = dataset.frames(&dataset.records[0])?;
    let f = model.video.config.frames_per_clip.min(frames.len());
    let clips = vec![vec![frames[..f].iter().collect::<Vec<_>>()]];
    let mut none = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let alphas = model.video.alphas(SwaMode::EvalMean, &mut none)?;
    let video_target = seeded_normal(1, model.backbones.config.joint_dim, 6, 1.0);
    let video_loss = |t: &Tape| -> Result<Var, ExperimentError> {
        let e = model.video.encode_videos(t, &model.store, &model.backbones, &clips, &alphas, None)?;
        Ok(t.sum_all(t.mul(e, t.constant(video_target.clone()))))
    };

    let missing = |what: &str| ExperimentError::Setup(format!("model has no {what}"));
    let prefixes = model.label.prefixes.ok_or_else(|| missing("LLM prefixes"))?;
    let pt = model.label.prompt_transformer.as_ref().ok_or_else(|| missing("prompt transformer"))?;
    let pt_weight = pt.blocks.first().map_or(pt.lift.weight, |b| b.attn.wq.weight);
    let last = model.video.blocks.last().ok_or_else(|| missing("temporal blocks"))?;
    let first = &model.video.blocks[0];

    let check = |component: &'static str, id: ParamId, video: bool| -> Result<GradCheckEntry, ExperimentError> {
        let report = if video {
            let coords = top_gradient_coords(&model.store, id, GRADCHECK_COORDS, video_loss)?;
            finite_diff_grad_check(&model.store, id, GRADCHECK_EPSILON, &coords, video_loss)?
        } else {
            let coords = top_gradient_coords(&model.store, id, GRADCHECK_COORDS, label_loss)?;
            finite_diff_grad_check(&model.store, id, GRADCHECK_EPSILON, &coords, label_loss)?
        };
        Ok(GradCheckEntry { component, report })
    };
    Ok(vec![
        check("llm_prefix", prefixes, false)?,
        check("prompt_transformer", pt_weight, false)?,
        check("temporal_attention", last.temporal_attn.wq.weight, true)?,
        check("proj_spatial", first.proj_spatial.weight, true)?,
    ])
}
