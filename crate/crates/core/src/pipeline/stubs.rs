//! Model interfaces of the labeling pipeline and deterministic stand-ins.

use std::collections::{BTreeMap, BTreeSet};

use super::{normalize_concept, PipelineError};
use crate::backbones::Backbones;
use crate::data::wordbank::{entry_by_name, STATIC_CONCEPTS, TEMPORAL_CONCEPTS};
use crate::data::{Dataset, FrameSource, ManifestRecord};
use crate::nn::init::{derive_seed, seeded_normal};
use crate::nn::{ParamStore, Precision};

/// Produces ordered frame captions for a video.
pub trait Captioner {
    fn caption(&self, record: &ManifestRecord) -> Result<Vec<String>, PipelineError>;
}

/// A text-completion model.
pub trait TextCompletion {
    fn complete(&self, prompt: &str) -> Result<String, PipelineError>;
}

/// Maps texts to unit vectors.
pub trait TextEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, PipelineError>;
}

/// Captions synthetic videos from the word bank: frame `f` describes
/// concept `f mod n` of the video's `n` concepts.
pub struct WordbankCaptioner<'a> {
    pub dataset: &'a Dataset,
}

impl Captioner for WordbankCaptioner<'_> {
    fn caption(&self, record: &ManifestRecord) -> Result<Vec<String>, PipelineError> {
        let FrameSource::Generator { concepts, .. } = &record.source else {
            return Err(PipelineError::Stage(format!("{}: the word-bank captioner needs generator frames", record.video_id)));
        };
        let frames = self.dataset.info.spec.frames_per_video;
        let sentences = concepts
            .iter()
            .map(|&c| {
                let name = &self.dataset.info.concepts[c].name;
                entry_by_name(name)
                    .map(|e| e.caption.to_string())
                    .ok_or_else(|| PipelineError::Stage(format!("no caption for concept {name:?}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        if sentences.is_empty() {
            return Ok(vec!["an empty scene".into()]);
        }
        Ok((0..frames.max(1)).map(|f| sentences[f % sentences.len()].clone()).collect())
    }
}

/// Table-driven extractor. Reads the captions of the last video in the
/// prompt and answers with a numbered list of the concepts whose trigger
/// phrase occurs in them, in order of first appearance. Without a match it
/// answers with prose, which parses to an empty list.
pub struct KeywordExtractor {
    /// (trigger phrase, concept) pairs, matched on normalized word boundaries.
    pub table: Vec<(String, String)>,
}

impl KeywordExtractor {
    pub fn new(table: Vec<(String, String)>) -> Self {
        Self { table }
    }

    /// Every word-bank caption sentence triggers its concept name.
    pub fn wordbank() -> Self {
        Self::new(
            STATIC_CONCEPTS
                .iter()
                .chain(TEMPORAL_CONCEPTS)
                .map(|c| (c.caption.to_string(), c.name.to_string()))
                .collect(),
        )
    }
}

fn words_of(text: &str) -> String {
    format!(" {} ", crate::backbones::tokenizer::normalize(text))
}

/// Caption lines of the final description block of an extraction prompt.
pub fn last_description(prompt: &str) -> Vec<String> {
    let Some(start) = prompt.rfind(" description:") else {
        return Vec::new();
    };
    let body = &prompt[start + " description:".len()..];
    let body = body.split("Verbs Found:").next().unwrap_or("");
    body.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| l.trim_start_matches(|c: char| c.is_ascii_digit()).trim_start_matches(['.', ')']).trim().to_string())
        .collect()
}

impl TextCompletion for KeywordExtractor {
    fn complete(&self, prompt: &str) -> Result<String, PipelineError> {
        let mut found: Vec<&str> = Vec::new();
        for caption in last_description(prompt) {
            let hay = words_of(&caption);
            for (trigger, concept) in &self.table {
                if hay.contains(&words_of(trigger)) && !found.contains(&concept.as_str()) {
                    found.push(concept);
                }
            }
        }
        if found.is_empty() {
            return Ok("The description does not show any clear visual action.".into());
        }
        Ok(found.iter().enumerate().map(|(i, c)| format!("{}. {c}\n", i + 1)).collect())
    }
}

/// Bag-of-words embedder: each word, after stop-word removal and synonym
/// canonicalization, contributes a fixed seeded Gaussian direction.
pub struct SynonymStubEmbedder {
    pub dim: usize,
    pub seed: u64,
    pub canonical: BTreeMap<String, String>,
    pub stop_words: BTreeSet<String>,
}

const STOP_WORDS: &[&str] = &["a", "an", "the", "of", "is", "are", "on", "in", "video", "to", "into", "at"];

impl SynonymStubEmbedder {
    pub fn new(dim: usize, seed: u64, synonyms: &[(&str, &str)]) -> Self {
        Self {
            dim,
            seed,
            canonical: synonyms.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect(),
            stop_words: STOP_WORDS.iter().map(|s| s.to_string()).collect(),
        }
    }

    /// Word-bank synonym pairs plus the inflections the fixtures use.
    pub fn with_default_table(dim: usize, seed: u64) -> Self {
        let mut pairs: Vec<(&str, &str)> = crate::data::wordbank::synonym_word_pairs().into_iter().map(|(a, b)| (b, a)).collect();
        pairs.extend([
            ("sliding", "slide"),
            ("barbequing", "grilling"),
            ("barbecuing", "grilling"),
            ("barbecue", "grilling"),
            ("grill", "grilling"),
        ]);
        Self::new(dim, seed, &pairs)
    }

    fn word_vector(&self, word: &str) -> Vec<f64> {
        seeded_normal(1, self.dim, derive_seed(self.seed, &format!("stub.{word}")), 1.0).data().to_vec()
    }
}

impl TextEmbedder for SynonymStubEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, PipelineError> {
        Ok(texts
            .iter()
            .map(|t| {
                let mut v = vec![0.0; self.dim];
                for w in crate::backbones::tokenizer::normalize(t).split_whitespace() {
                    if self.stop_words.contains(w) {
                        continue;
                    }
                    let w = self.canonical.get(w).map_or(w, String::as_str);
                    for (a, b) in v.iter_mut().zip(self.word_vector(w)) {
                        *a += b;
                    }
                }
                unit(v)
            })
            .collect())
    }
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    } else if let Some(x) = v.first_mut() {
        // Text with no content words still gets a unit vector.
        *x = 1.0;
    }
    v
}

/// Embeds text with the toy vision-language text encoder.
pub struct TextEncoderEmbedder<'a> {
    pub store: &'a ParamStore,
    pub backbones: &'a Backbones,
    pub precision: Precision,
}

impl TextEmbedder for TextEncoderEmbedder<'_> {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, PipelineError> {
        let bb = self.backbones;
        texts
            .iter()
            .map(|t| {
                let mut ids = bb.tokenizer.tokenize(&normalize_concept(t));
                let max = bb.config.text_max_len;
                if ids.len() > max {
                    let eot = *ids.last().expect("tokenize appends EOT");
                    ids.truncate(max - 1);
                    ids.push(eot);
                }
                bb.text
                    .encode_text_vec(self.store, self.precision, &ids)
                    .map_err(|e| PipelineError::Stage(e.to_string()))
            })
            .collect()
    }
}
