//! Closed-vocabulary word-level tokenizer.

use std::collections::HashMap;
use std::fmt::Write as _;

use super::BackboneError;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOT: u32 = 2;
pub const UNK: u32 = 3;
pub const DECODER_START: u32 = 4;

const SPECIALS: [&str; 5] = ["<pad>", "<bos>", "<eot>", "<unk>", "<dec>"];

#[derive(Clone, Debug, PartialEq)]
pub struct Tokenizer {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

/// Lowercases, turns every non-alphanumeric character into a space and
/// collapses whitespace.
pub fn normalize(text: &str) -> String {
    let mapped: String = text
        .chars()
        .map(|c| if c.is_alphanumeric() { c.to_ascii_lowercase() } else { ' ' })
        .flat_map(char::to_lowercase)
        .collect();
    mapped.split_whitespace().collect::<Vec<_>>().join(" ")
}

impl Tokenizer {
    /// Specials take ids 0..5, then `words` in the given order (duplicates dropped).
    pub fn new<S: AsRef<str>>(words: &[S]) -> Self {
        let mut all: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, u32> = all.iter().enumerate().map(|(i, w)| (w.clone(), i as u32)).collect();
        for w in words {
            let w = normalize(w.as_ref());
            if w.is_empty() || w.contains(' ') || index.contains_key(&w) {
                continue;
            }
            index.insert(w.clone(), all.len() as u32);
            all.push(w);
        }
        Self { words: all, index }
    }

    /// Tokenizer over the synthetic word bank.
    pub fn from_wordbank() -> Self {
        Self::new(&crate::data::wordbank::all_words())
    }

    pub fn vocab_size(&self) -> usize {
        self.words.len()
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    /// Word ids of the normalized text, unknown words mapped to `UNK`, no `EOT`.
    pub fn encode_words(&self, text: &str) -> Vec<u32> {
        normalize(text)
            .split_whitespace()
            .map(|w| self.id(w).unwrap_or(UNK))
            .collect()
    }

    /// Word ids followed by `EOT`. The empty string yields `[EOT]`.
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        let mut ids = self.encode_words(text);
        ids.push(EOT);
        ids
    }

    /// Joins words with single spaces, skipping `PAD`/`BOS`/`DECODER_START`
    /// and stopping at the first `EOT`.
    pub fn detokenize(&self, ids: &[u32]) -> String {
        let mut out: Vec<&str> = Vec::new();
        for &id in ids {
            match id {
                EOT => break,
                PAD | BOS | DECODER_START => continue,
                _ => out.push(self.word(id).unwrap_or("<unk>")),
            }
        }
        out.join(" ")
    }

    pub fn all_known(&self, text: &str) -> bool {
        normalize(text).split_whitespace().all(|w| self.index.contains_key(w))
    }

    /// `word<TAB>id` lines in id order.
    pub fn to_vocab_file(&self) -> String {
        let mut s = String::new();
        for (i, w) in self.words.iter().enumerate() {
            let _ = writeln!(s, "{w}\t{i}");
        }
        s
    }

    pub fn from_vocab_file(text: &str) -> Result<Self, BackboneError> {
        let mut entries: Vec<(u32, String)> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (w, id) = line
                .split_once('\t')
                .ok_or_else(|| BackboneError::Vocabulary(format!("line {}: expected word<TAB>id", lineno + 1)))?;
            let id: u32 = id
                .trim()
                .parse()
                .map_err(|_| BackboneError::Vocabulary(format!("line {}: bad id", lineno + 1)))?;
            entries.push((id, w.to_string()));
        }
        entries.sort();
        for (expect, (id, _)) in entries.iter().enumerate() {
            if *id as usize != expect {
                return Err(BackboneError::Vocabulary("ids must be dense from 0".into()));
            }
        }
        for (i, s) in SPECIALS.iter().enumerate() {
            if entries.get(i).map(|e| e.1.as_str()) != Some(s) {
                return Err(BackboneError::Vocabulary(format!("special token {s} missing at id {i}")));
            }
        }
        let words: Vec<String> = entries.into_iter().map(|(_, w)| w).collect();
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i as u32)).collect();
        Ok(Self { words, index })
    }
}
