//! Flat binary checkpoint format.
//!
//! ```text
//! magic   b"OVCK"
//! u32     format version (1)
//! u32     parameter count
//! repeated:
//!   u32   name length, then UTF-8 name bytes
//!   u32   rank (always 2), then u32 rows, u32 cols
//!   f32   rows*cols values, row-major
//! ```
//! All integers and floats are little-endian.

use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::mat::Mat;
use super::param::ParamStore;
use super::NnError;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"OVCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointRecord {
    pub name: String,
    pub values: Mat,
}

pub fn encode_records(records: &[CheckpointRecord]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for r in records {
        out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
        out.extend_from_slice(r.name.as_bytes());
        out.extend_from_slice(&2u32.to_le_bytes());
        out.extend_from_slice(&(r.values.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(r.values.cols() as u32).to_le_bytes());
        for &v in r.values.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn encode_store(store: &ParamStore) -> Vec<u8> {
    let records: Vec<CheckpointRecord> = store
        .iter()
        .map(|(_, p)| CheckpointRecord {
            name: p.name.clone(),
            values: p.values.clone(),
        })
        .collect();
    encode_records(&records)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NnError> {
        if self.buf.len() - self.pos < n {
            return Err(NnError::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, NnError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_records(bytes: &[u8]) -> Result<Vec<CheckpointRecord>, NnError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(NnError::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(NnError::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let n = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|_| NnError::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()?;
        if rank != 2 {
            return Err(NnError::Checkpoint(format!("{name}: unsupported rank {rank}")));
        }
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let raw = r.take(rows * cols * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        out.push(CheckpointRecord {
            name,
            values: Mat::from_vec(rows, cols, data),
        });
    }
    if r.pos != bytes.len() {
        return Err(NnError::Checkpoint("trailing bytes after last record".into()));
    }
    Ok(out)
}

/// Copies every record into the parameter of the same name. All names must
/// exist and shapes must match; nothing is modified on error.
pub fn load_into(store: &mut ParamStore, records: &[CheckpointRecord]) -> Result<(), NnError> {
    let mut plan = Vec::with_capacity(records.len());
    for r in records {
        let id = store
            .id(&r.name)
            .ok_or_else(|| NnError::Checkpoint(format!("unknown parameter {}", r.name)))?;
        if store.values(id).shape() != r.values.shape() {
            return Err(NnError::Checkpoint(format!("shape mismatch for {}", r.name)));
        }
        plan.push(id);
    }
    for (id, r) in plan.into_iter().zip(records) {
        store.overwrite(id, r.values.clone())?;
    }
    Ok(())
}

/// Writes through a temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), NnError> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save_store(store: &ParamStore, path: &Path) -> Result<(), NnError> {
    write_atomic(path, &encode_store(store))
}

pub fn load_store(store: &mut ParamStore, path: &Path) -> Result<(), NnError> {
    let bytes = fs::read(path)?;
    load_into(store, &decode_records(&bytes)?)
}

/// Hex SHA-256 of the encoded store; identifies a model version.
pub fn store_hash(store: &ParamStore) -> String {
    hex_digest(&encode_store(store))
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
