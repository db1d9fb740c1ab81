//! Synthetic labeling: captions, concept extraction with a text-completion
//! model, clustering-based vocabulary deduplication, caption-to-label
//! assignment and manifest merging. Every stage reads and writes JSONL so a
//! later stage can be rerun from persisted intermediates.

mod kmeans;
mod stubs;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub use kmeans::{kmeans, kmeans_best_of, KMeansResult};
pub use stubs::{last_description, Captioner, KeywordExtractor, SynonymStubEmbedder, TextCompletion, TextEmbedder, TextEncoderEmbedder, WordbankCaptioner};

use crate::data::{Dataset, ManifestRecord};
use crate::nn::mat::dot;

pub const EXTRACTION_PROMPT: &str = include_str!("../../resources/extraction_prompt.txt");
const CAPTIONS_SLOT: &str = "<output_captions>";
pub const ASSIGN_TEMPLATE: &str = "a video of {label}";

pub const CAPTIONS_FILE: &str = "captions.jsonl";
pub const CONCEPTS_FILE: &str = "concepts.jsonl";
pub const VOCAB_FILE: &str = "vocab.jsonl";
pub const ASSIGNMENTS_FILE: &str = "assignments.jsonl";

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("k-means: {0}")]
    KMeans(String),
    #[error("unknown video id {0:?} in assignments")]
    UnknownVideo(String),
    #[error("empty vocabulary")]
    EmptyVocabulary,
    #[error("{0}")]
    Stage(String),
    #[error("io: {0}")]
    Io(String),
    #[error("{path}:{line}: {msg}")]
    Format { path: String, line: usize, msg: String },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub video: String,
    pub captions: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptList {
    pub video: String,
    pub concepts: Vec<String>,
}

/// One distinct concept with its corpus frequency and cluster.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabEntry {
    pub label: String,
    pub frequency: usize,
    pub cluster: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub video: String,
    pub labels: Vec<String>,
}

/// Concept-to-cluster map with one canonical label per cluster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClusterMap {
    pub cluster_of: BTreeMap<String, usize>,
    /// Indexed by cluster id; empty for a cluster without members.
    pub canonical: Vec<String>,
    pub k: usize,
}

impl ClusterMap {
    /// Canonical label of a known concept.
    pub fn apply(&self, concept: &str) -> Option<&str> {
        self.cluster_of.get(concept).map(|&c| self.canonical[c].as_str())
    }

    /// Distinct canonical labels in cluster order.
    pub fn vocabulary(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        self.canonical.iter().filter(|c| !c.is_empty() && seen.insert(c.as_str())).cloned().collect()
    }

    /// Entries as written to the vocab stage file, sorted by label.
    pub fn entries(&self, freqs: &BTreeMap<String, usize>) -> Vec<VocabEntry> {
        self.cluster_of
            .iter()
            .map(|(l, &c)| VocabEntry {
                label: l.clone(),
                frequency: freqs.get(l).copied().unwrap_or(0),
                cluster: c,
            })
            .collect()
    }

    pub fn from_entries(entries: &[VocabEntry]) -> Self {
        let freqs = entries.iter().map(|e| (e.label.clone(), e.frequency)).collect();
        let assignment = entries.iter().map(|e| (e.label.clone(), e.cluster)).collect();
        dedup_vocabulary(&freqs, &assignment)
    }
}

/// Lowercased, trimmed, inner whitespace collapsed.
pub fn normalize_concept(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// The in-context extraction prompt with `captions` as the final video.
pub fn render_extraction_prompt(captions: &[String]) -> String {
    let list: Vec<String> = captions.iter().enumerate().map(|(i, c)| format!("{}. {c}", i + 1)).collect();
    EXTRACTION_PROMPT.replace(CAPTIONS_SLOT, &list.join("\n"))
}

/// Items of the numbered-list lines (`1. x`, `2) y`); other lines are ignored.
pub fn parse_concept_list(completion: &str) -> Vec<String> {
    completion
        .lines()
        .filter_map(|line| {
            let t = line.trim_start();
            let digits = t.len() - t.trim_start_matches(|c: char| c.is_ascii_digit()).len();
            if digits == 0 {
                return None;
            }
            let rest = t[digits..].strip_prefix(['.', ')'])?;
            let item = normalize_concept(rest);
            (!item.is_empty()).then_some(item)
        })
        .collect()
}

pub fn extract_concepts(captions: &CaptionRecord, extractor: &dyn TextCompletion) -> Result<ConceptList, PipelineError> {
    let completion = extractor.complete(&render_extraction_prompt(&captions.captions))?;
    let concepts = parse_concept_list(&completion);
    if concepts.is_empty() {
        log::warn!("{}: completion has no numbered list; no concepts extracted", captions.video);
    }
    Ok(ConceptList {
        video: captions.video.clone(),
        concepts,
    })
}

/// Occurrences of every concept across the corpus.
pub fn concept_frequencies(lists: &[ConceptList]) -> BTreeMap<String, usize> {
    let mut f = BTreeMap::new();
    for l in lists {
        for c in &l.concepts {
            *f.entry(c.clone()).or_insert(0) += 1;
        }
    }
    f
}

/// One unit vector per distinct concept, in the map's (sorted) order.
pub fn embed_concepts(concepts: &BTreeMap<String, usize>, embedder: &dyn TextEmbedder) -> Result<Vec<Vec<f64>>, PipelineError> {
    let texts: Vec<String> = concepts.keys().cloned().collect();
    embedder.embed(&texts)
}

/// Default cluster count: a third of the distinct concepts, rounded up.
pub fn default_k(distinct: usize) -> usize {
    distinct.div_ceil(3).max(1)
}

/// Canonical label per cluster: the most frequent member, ties to the
/// lexicographically smallest.
pub fn dedup_vocabulary(freqs: &BTreeMap<String, usize>, assignment: &BTreeMap<String, usize>) -> ClusterMap {
    let k = assignment.values().map(|&c| c + 1).max().unwrap_or(0);
    let mut best: Vec<Option<(&str, usize)>> = vec![None; k];
    for (label, &c) in assignment {
        let f = freqs.get(label).copied().unwrap_or(0);
        // Labels arrive sorted, so a strict comparison keeps the smallest on ties.
        if best[c].is_none_or(|(_, bf)| f > bf) {
            best[c] = Some((label, f));
        }
    }
    ClusterMap {
        cluster_of: assignment.clone(),
        canonical: best.into_iter().map(|b| b.map_or_else(String::new, |(l, _)| l.to_string())).collect(),
        k,
    }
}

/// Settings of the dedup stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DedupConfig {
    /// None picks [`default_k`].
    pub k: Option<usize>,
    pub seed: u64,
    pub max_iters: usize,
    /// Independent k-means++ runs; the lowest inertia wins.
    pub restarts: usize,
}

impl Default for DedupConfig {
    fn default() -> Self {
        Self {
            k: None,
            seed: 0,
            max_iters: 100,
            restarts: 10,
        }
    }
}

/// Embeds, clusters and canonicalizes the extracted concepts.
pub fn dedup_stage(lists: &[ConceptList], embedder: &dyn TextEmbedder, cfg: &DedupConfig) -> Result<(ClusterMap, Vec<VocabEntry>), PipelineError> {
    let freqs = concept_frequencies(lists);
    if freqs.is_empty() {
        return Err(PipelineError::EmptyVocabulary);
    }
    let vectors = embed_concepts(&freqs, embedder)?;
    // Synonyms can embed identically; never ask for more clusters than points.
    let distinct = vectors.iter().map(|v| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>()).collect::<BTreeSet<_>>().len();
    let k = cfg.k.unwrap_or_else(|| default_k(freqs.len())).min(distinct);
    let km = kmeans_best_of(&vectors, k, cfg.seed, cfg.max_iters, cfg.restarts)?;
    let assignment = freqs.keys().cloned().zip(km.assignment).collect();
    let map = dedup_vocabulary(&freqs, &assignment);
    let entries = map.entries(&freqs);
    Ok((map, entries))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AssignConfig {
    pub top_k: usize,
    pub min_sim: f64,
}

impl Default for AssignConfig {
    fn default() -> Self {
        Self { top_k: 10, min_sim: 0.7 }
    }
}

/// Labels whose prompt text is close to one of the video's captions.
pub fn assign_labels(
    captions: &[CaptionRecord],
    vocabulary: &[String],
    embedder: &dyn TextEmbedder,
    cfg: &AssignConfig,
) -> Result<Vec<Assignment>, PipelineError> {
    if vocabulary.is_empty() {
        return Err(PipelineError::EmptyVocabulary);
    }
    let prompts: Vec<String> = vocabulary.iter().map(|l| ASSIGN_TEMPLATE.replace("{label}", l)).collect();
    let label_vecs = embedder.embed(&prompts)?;
    captions
        .iter()
        .map(|rec| {
            let caps = embedder.embed(&rec.captions)?;
            let mut scored: Vec<(f64, &String)> = vocabulary
                .iter()
                .zip(&label_vecs)
                .map(|(l, lv)| (caps.iter().map(|c| dot(c, lv)).fold(f64::NEG_INFINITY, f64::max), l))
                .filter(|(s, _)| *s >= cfg.min_sim)
                .collect();
            scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
            scored.truncate(cfg.top_k);
            Ok(Assignment {
                video: rec.video.clone(),
                labels: scored.into_iter().map(|(_, l)| l.clone()).collect(),
            })
        })
        .collect()
}

/// Adds assigned labels to the manifest; original labels are never removed.
/// Returns the merged records and the vocabulary union (original order,
/// then new labels sorted).
pub fn merge_manifests(records: &[ManifestRecord], vocabulary: &[String], assignments: &[Assignment]) -> Result<(Vec<ManifestRecord>, Vec<String>), PipelineError> {
    let mut by_id: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        by_id.insert(&r.video_id, i);
    }
    let mut out = records.to_vec();
    let mut new_labels = BTreeSet::new();
    for a in assignments {
        let &i = by_id.get(a.video.as_str()).ok_or_else(|| PipelineError::UnknownVideo(a.video.clone()))?;
        for l in &a.labels {
            if !out[i].labels.contains(l) {
                out[i].labels.push(l.clone());
            }
            new_labels.insert(l.clone());
        }
    }
    let mut vocab = vocabulary.to_vec();
    for l in new_labels {
        if !vocab.contains(&l) {
            vocab.push(l);
        }
    }
    Ok((out, vocab))
}

pub fn caption_dataset(dataset: &Dataset, captioner: &dyn Captioner) -> Result<Vec<CaptionRecord>, PipelineError> {
    dataset
        .records
        .iter()
        .map(|r| {
            let captions = captioner.caption(r)?;
            if captions.is_empty() {
                return Err(PipelineError::Stage(format!("{}: captioner returned no captions", r.video_id)));
            }
            Ok(CaptionRecord {
                video: r.video_id.clone(),
                captions,
            })
        })
        .collect()
}

pub fn extract_stage(captions: &[CaptionRecord], extractor: &dyn TextCompletion) -> Result<Vec<ConceptList>, PipelineError> {
    captions.iter().map(|c| extract_concepts(c, extractor)).collect()
}

pub fn to_jsonl<T: Serialize>(items: &[T]) -> String {
    let mut s = String::new();
    for it in items {
        s.push_str(&serde_json::to_string(it).expect("stage records serialize"));
        s.push('\n');
    }
    s
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), PipelineError> {
    crate::nn::checkpoint::write_atomic(path, to_jsonl(items).as_bytes()).map_err(|e| PipelineError::Io(format!("{}: {e}", path.display())))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, PipelineError> {
    let f = fs::File::open(path).map_err(|e| PipelineError::Io(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| PipelineError::Io(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| PipelineError::Format {
            path: path.display().to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}
