//! Scoring videos against label embeddings: the persisted vocabulary
//! database, single-video inference and split evaluation.

pub mod db;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

pub use db::{expand_vocabulary, expand_with_hash, load_db, save_db, DbEntry, VocabularyDb, DB_VERSION};

use crate::data::{DataError, Dataset, Split};
use crate::label::{EmbeddingVariant, LabelEmbedding, LabelError};
use crate::metrics::{ScoredPair, ScoredPairSet};
use crate::model::Model;
use crate::nn::checkpoint::store_hash;
use crate::nn::mat::dot;
use crate::nn::{Mat, Precision};
use crate::video::{TapCache, VideoError};

#[derive(Debug, thiserror::Error)]
pub enum InferenceError {
    #[error("vocabulary built with different model")]
    ModelMismatch,
    #[error("vocabulary database is empty")]
    EmptyDb,
    #[error("unsupported database version {found} (expected {expected})")]
    Version { expected: u32, found: u32 },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },
    #[error("truncated vocabulary database")]
    Truncated,
    #[error("bad vocabulary database: {0}")]
    Format(String),
    #[error("io: {0}")]
    Io(String),
    #[error(transparent)]
    Label(#[from] LabelError),
    #[error(transparent)]
    Video(#[from] VideoError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Label vectors grouped per label. The dual-context variant carries a
/// negative vector per label and scores `(s_pos − s_neg)/2`, which stays in
/// `[−1, 1]` and orders labels like the softmax probability does.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelScorer {
    pub labels: Vec<String>,
    pub pos: Vec<Vec<f64>>,
    pub neg: Option<Vec<Vec<f64>>>,
}

impl LabelScorer {
    pub fn from_embeddings(embs: &[LabelEmbedding]) -> Result<Self, InferenceError> {
        let items: Vec<(&str, EmbeddingVariant, Vec<f64>)> = embs.iter().map(|e| (e.label.as_str(), e.variant, e.vector.clone())).collect();
        Self::from_items(&items)
    }

    pub fn from_db(db: &VocabularyDb) -> Result<Self, InferenceError> {
        let items: Vec<(&str, EmbeddingVariant, Vec<f64>)> = db.entries.iter().map(|e| (e.label.as_str(), e.variant, e.vector_f64())).collect();
        Self::from_items(&items)
    }

    fn from_items(items: &[(&str, EmbeddingVariant, Vec<f64>)]) -> Result<Self, InferenceError> {
        if items.is_empty() {
            return Err(InferenceError::EmptyDb);
        }
        let mut labels = Vec::new();
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        let mut seen = BTreeSet::new();
        for (label, variant, v) in items {
            if *variant == EmbeddingVariant::DualcoopNeg {
                continue;
            }
            if !seen.insert(*label) {
                return Err(InferenceError::Format(format!("label {label:?} appears twice")));
            }
            labels.push(label.to_string());
            pos.push(v.clone());
        }
        let dual = items.iter().any(|i| i.1 == EmbeddingVariant::DualcoopNeg);
        if dual {
            for l in &labels {
                let v = items
                    .iter()
                    .find(|i| i.0 == l && i.1 == EmbeddingVariant::DualcoopNeg)
                    .ok_or_else(|| InferenceError::Format(format!("label {l:?} lacks its negative entry")))?;
                neg.push(v.2.clone());
            }
        }
        Ok(Self {
            labels,
            pos,
            neg: dual.then_some(neg),
        })
    }

    /// Score of every label against one unit video embedding.
    pub fn score(&self, video: &[f64]) -> Vec<f64> {
        match &self.neg {
            None => self.pos.iter().map(|l| dot(l, video)).collect(),
            Some(neg) => self.pos.iter().zip(neg).map(|(p, n)| 0.5 * (dot(p, video) - dot(n, video))).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelScore {
    pub label: String,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceResult {
    pub video_id: String,
    /// One score per database label, in database order.
    pub scores: Vec<LabelScore>,
    /// Labels with `s ≥ threshold`, best first, when a threshold was given.
    pub predicted: Option<Vec<String>>,
}

impl InferenceResult {
    /// Scores sorted best first; ties keep database order.
    pub fn ranked(&self) -> Vec<&LabelScore> {
        let mut v: Vec<&LabelScore> = self.scores.iter().collect();
        v.sort_by(|a, b| b.score.total_cmp(&a.score));
        v
    }
}

/// A loaded database checked against a model once, then shared by any
/// number of readers.
pub struct InferenceSession<'m> {
    pub model: &'m Model,
    pub db: VocabularyDb,
    pub precision: Precision,
    scorer: LabelScorer,
}

impl<'m> InferenceSession<'m> {
    pub fn new(model: &'m Model, db: VocabularyDb, precision: Precision) -> Result<Self, InferenceError> {
        if db.is_empty() {
            return Err(InferenceError::EmptyDb);
        }
        if db.checkpoint_hash.as_deref() != Some(store_hash(&model.store).as_str()) {
            return Err(InferenceError::ModelMismatch);
        }
        let scorer = LabelScorer::from_db(&db)?;
        Ok(Self {
            model,
            db,
            precision,
            scorer,
        })
    }

    pub fn scorer(&self) -> &LabelScorer {
        &self.scorer
    }

    /// One video-encoder pass, then a score per database label.
    pub fn infer(&self, video_id: &str, frames: &[Mat], threshold: Option<f64>, cache: Option<&TapCache>) -> Result<InferenceResult, InferenceError> {
        let m = self.model;
        let emb = m.video.embed_video(&m.store, &m.backbones, self.precision, video_id, frames, cache)?;
        Ok(self.result(video_id, &emb.vector, threshold))
    }

    /// Scores a precomputed video embedding.
    pub fn result(&self, video_id: &str, video: &[f64], threshold: Option<f64>) -> InferenceResult {
        let scores: Vec<LabelScore> = self
            .scorer
            .labels
            .iter()
            .zip(self.scorer.score(video))
            .map(|(l, s)| LabelScore { label: l.clone(), score: s })
            .collect();
        let mut res = InferenceResult {
            video_id: video_id.to_string(),
            scores,
            predicted: None,
        };
        if let Some(t) = threshold {
            res.predicted = Some(res.ranked().into_iter().filter(|s| s.score >= t).map(|s| s.label.clone()).collect());
        }
        res
    }
}

/// Single-call inference: checks the model against the database, encodes
/// the video once and scores every entry.
pub fn infer(
    video_id: &str,
    frames: &[Mat],
    db: &VocabularyDb,
    model: &Model,
    precision: Precision,
    threshold: Option<f64>,
) -> Result<InferenceResult, InferenceError> {
    InferenceSession::new(model, db.clone(), precision)?.infer(video_id, frames, threshold, None)
}

/// Scores every video of `split` against the split's full vocabulary.
/// Label embeddings are computed fresh from the current parameters.
pub fn evaluate_split(model: &Model, dataset: &Dataset, split: Split, precision: Precision, cache: Option<&TapCache>) -> Result<ScoredPairSet, InferenceError> {
    let vocab = dataset.split_vocabulary(split);
    let embs = model.label.embed_labels(&model.store, &model.backbones, precision, &vocab)?;
    let scorer = LabelScorer::from_embeddings(&embs)?;
    score_split(model, dataset, split, &scorer, precision, cache)
}

/// Scores a split against stored label embeddings. Every label of the
/// split's vocabulary must be in the database.
pub fn evaluate_split_with_db(
    model: &Model,
    dataset: &Dataset,
    split: Split,
    db: &VocabularyDb,
    precision: Precision,
    cache: Option<&TapCache>,
) -> Result<ScoredPairSet, InferenceError> {
    let session = InferenceSession::new(model, db.clone(), precision)?;
    let vocab = dataset.split_vocabulary(split);
    if let Some(missing) = vocab.iter().find(|l| !db.contains(l)) {
        return Err(InferenceError::Format(format!("label {missing:?} is not in the vocabulary database; run expand-vocab first")));
    }
    let all = session.scorer();
    let keep: Vec<usize> = all.labels.iter().enumerate().filter(|(_, l)| vocab.contains(l)).map(|(i, _)| i).collect();
    let scorer = LabelScorer {
        labels: keep.iter().map(|&i| all.labels[i].clone()).collect(),
        pos: keep.iter().map(|&i| all.pos[i].clone()).collect(),
        neg: all.neg.as_ref().map(|n| keep.iter().map(|&i| n[i].clone()).collect()),
    };
    score_split(model, dataset, split, &scorer, precision, cache)
}

fn score_split(
    model: &Model,
    dataset: &Dataset,
    split: Split,
    scorer: &LabelScorer,
    precision: Precision,
    cache: Option<&TapCache>,
) -> Result<ScoredPairSet, InferenceError> {
    let records = dataset.split(split);
    let mut pairs = Vec::with_capacity(records.len() * scorer.labels.len());
    // Bounded batches keep the tape small.
    for chunk in records.chunks(16) {
        let frames = chunk.iter().map(|r| dataset.frames(r)).collect::<Result<Vec<_>, _>>()?;
        let videos: Vec<(&str, &[Mat])> = chunk.iter().zip(&frames).map(|(r, f)| (r.video_id.as_str(), f.as_slice())).collect();
        let embs = model.video.embed_videos(&model.store, &model.backbones, precision, &videos, cache)?;
        for (rec, e) in chunk.iter().zip(&embs) {
            let truth: BTreeSet<&str> = rec.labels.iter().map(String::as_str).collect();
            for (label, s) in scorer.labels.iter().zip(scorer.score(&e.vector)) {
                pairs.push(ScoredPair {
                    video: rec.video_id.clone(),
                    label: label.clone(),
                    score: s,
                    truth: truth.contains(label.as_str()) as u8,
                });
            }
        }
    }
    Ok(ScoredPairSet::new(split.as_str(), pairs))
}

#[cfg(test)]
mod tests;
