//! Label-embedding database bound to one model version.
//!
//! File layout, all integers little-endian:
//! `"OVDB"`, version u32, dimension u32, entry count u32, hash length u32,
//! hash bytes (ASCII hex), then per entry: label length u32, UTF-8 label,
//! variant tag u8, `dimension` f32 values.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use super::InferenceError;
use crate::label::EmbeddingVariant;
use crate::model::Model;
use crate::nn::checkpoint::{store_hash, write_atomic};
use crate::nn::Precision;

pub const DB_MAGIC: &[u8; 4] = b"OVDB";
pub const DB_VERSION: u32 = 1;
const NORM_TOL: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct DbEntry {
    pub label: String,
    pub variant: EmbeddingVariant,
    pub vector: Vec<f32>,
}

impl DbEntry {
    pub fn vector_f64(&self) -> Vec<f64> {
        self.vector.iter().map(|&v| v as f64).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VocabularyDb {
    pub version: u32,
    pub dim: usize,
    /// Hash of the model store that produced every entry; None while empty.
    pub checkpoint_hash: Option<String>,
    pub entries: Vec<DbEntry>,
}

fn variant_tag(v: EmbeddingVariant) -> u8 {
    EmbeddingVariant::ALL.iter().position(|&x| x == v).expect("variant listed") as u8
}

impl VocabularyDb {
    pub fn new(dim: usize) -> Self {
        Self {
            version: DB_VERSION,
            dim,
            checkpoint_hash: None,
            entries: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Distinct labels in insertion order.
    pub fn labels(&self) -> Vec<&str> {
        let mut seen = BTreeSet::new();
        self.entries.iter().map(|e| e.label.as_str()).filter(|l| seen.insert(*l)).collect()
    }

    pub fn contains(&self, label: &str) -> bool {
        self.entries.iter().any(|e| e.label == label)
    }

    /// Unique `(label, variant)` keys, matching dimensions, unit vectors.
    pub fn validate(&self) -> Result<(), InferenceError> {
        let mut keys = BTreeSet::new();
        for e in &self.entries {
            if !keys.insert((e.label.as_str(), variant_tag(e.variant))) {
                return Err(InferenceError::Format(format!("duplicate entry for label {:?}", e.label)));
            }
            if e.vector.len() != self.dim {
                return Err(InferenceError::Dimension {
                    expected: self.dim,
                    found: e.vector.len(),
                });
            }
            let norm = e.vector.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > NORM_TOL {
                return Err(InferenceError::Format(format!("entry {:?} has norm {norm}", e.label)));
            }
        }
        if !self.entries.is_empty() && self.checkpoint_hash.is_none() {
            return Err(InferenceError::Format("entries without a checkpoint hash".into()));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let hash = self.checkpoint_hash.as_deref().unwrap_or("");
        out.extend_from_slice(DB_MAGIC);
        for v in [self.version, self.dim as u32, self.entries.len() as u32, hash.len() as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(hash.as_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.label.len() as u32).to_le_bytes());
            out.extend_from_slice(e.label.as_bytes());
            out.push(variant_tag(e.variant));
            for v in &e.vector {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, InferenceError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != DB_MAGIC {
            return Err(InferenceError::Format("not a vocabulary database".into()));
        }
        let version = r.u32()?;
        if version != DB_VERSION {
            return Err(InferenceError::Version {
                expected: DB_VERSION,
                found: version,
            });
        }
        let dim = r.u32()? as usize;
        let count = r.u32()? as usize;
        let hash_len = r.u32()? as usize;
        let hash = String::from_utf8(r.take(hash_len)?.to_vec()).map_err(|_| InferenceError::Format("hash is not UTF-8".into()))?;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let label = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| InferenceError::Format("label is not UTF-8".into()))?;
            let tag = r.take(1)?[0] as usize;
            let variant = *EmbeddingVariant::ALL.get(tag).ok_or_else(|| InferenceError::Format(format!("unknown variant tag {tag}")))?;
            let raw = r.take(dim * 4)?;
            let vector = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            entries.push(DbEntry { label, variant, vector });
        }
        if r.pos != bytes.len() {
            return Err(InferenceError::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let db = Self {
            version,
            dim,
            checkpoint_hash: (!hash.is_empty()).then_some(hash),
            entries,
        };
        db.validate()?;
        Ok(db)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], InferenceError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(InferenceError::Truncated)?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, InferenceError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Writes atomically: a temporary file, then rename.
pub fn save_db(db: &VocabularyDb, path: &Path) -> Result<(), InferenceError> {
    db.validate()?;
    write_atomic(path, &db.to_bytes()).map_err(|e| InferenceError::Io(format!("{}: {e}", path.display())))
}

pub fn load_db(path: &Path) -> Result<VocabularyDb, InferenceError> {
    let bytes = fs::read(path).map_err(|e| InferenceError::Io(format!("{}: {e}", path.display())))?;
    VocabularyDb::from_bytes(&bytes)
}

/// Appends embeddings for labels the database lacks. Each label is encoded
/// on its own, so the result does not depend on how labels are batched.
pub fn expand_vocabulary(db: &VocabularyDb, labels: &[String], model: &Model, precision: Precision) -> Result<VocabularyDb, InferenceError> {
    expand_with_hash(db, labels, model, precision, &store_hash(&model.store))
}

/// As [`expand_vocabulary`] with a precomputed model hash.
pub fn expand_with_hash(
    db: &VocabularyDb,
    labels: &[String],
    model: &Model,
    precision: Precision,
    hash: &str,
) -> Result<VocabularyDb, InferenceError> {
    if let Some(h) = &db.checkpoint_hash {
        if h != hash {
            return Err(InferenceError::ModelMismatch);
        }
    }
    let dim = model.backbones.config.joint_dim;
    if db.dim != dim {
        return Err(InferenceError::Dimension {
            expected: db.dim,
            found: dim,
        });
    }
    let mut out = db.clone();
    out.checkpoint_hash = Some(hash.to_string());
    for label in labels {
        if label.trim().is_empty() || out.contains(label) {
            continue;
        }
        let embs = model.label.embed_labels(&model.store, &model.backbones, precision, std::slice::from_ref(label))?;
        for e in embs {
            out.entries.push(DbEntry {
                label: e.label,
                variant: e.variant,
                vector: e.vector.iter().map(|&v| v as f32).collect(),
            });
        }
    }
    if out.entries.is_empty() {
        out.checkpoint_hash = db.checkpoint_hash.clone();
    }
    out.validate()?;
    Ok(out)
}
