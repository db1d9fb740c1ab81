//! Dataset manifests: JSONL video records, the vocabulary file and the
//! dataset description written next to them.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::synth::{SyntheticDatasetSpec, SyntheticWorld};
use super::wordbank::ConceptKind;
use super::DataError;
use crate::nn::Mat;

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const VOCABULARY_FILE: &str = "vocabulary.txt";
pub const DATASET_FILE: &str = "dataset.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    TestClosed,
    TestOpen,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Val, Split::TestClosed, Split::TestOpen];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Val => "val",
            Self::TestClosed => "test_closed",
            Self::TestOpen => "test_open",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|x| x.as_str() == s)
    }
}

/// Where a video's frames come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FrameSource {
    /// Rendered on demand by the synthetic world.
    Generator {
        concepts: Vec<usize>,
        phases: Vec<usize>,
        noise_seed: u64,
    },
    /// Raw little-endian f32 tensor of `frames × G² × patch_dim` values.
    File { path: String, frames: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub video_id: String,
    pub source: FrameSource,
    pub labels: Vec<String>,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptInfo {
    pub name: String,
    pub synonym: String,
    pub kind: ConceptKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub spec: SyntheticDatasetSpec,
    pub seed: u64,
    pub concepts: Vec<ConceptInfo>,
}

pub fn read_frame_file(path: &str, frames: usize, rows: usize, cols: usize) -> Result<Vec<Mat>, DataError> {
    let bytes = fs::read(path).map_err(|e| DataError::Io(format!("{path}: {e}")))?;
    let per = rows * cols;
    if bytes.len() != frames * per * 4 || frames == 0 {
        return Err(DataError::Format(format!("{path}: expected {} f32 values, found {} bytes", frames * per, bytes.len())));
    }
    let vals: Vec<f64> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
    Ok(vals.chunks(per).map(|c| Mat::from_vec(rows, cols, c.to_vec())).collect())
}

pub fn write_frame_file(path: &Path, frames: &[Mat]) -> Result<(), DataError> {
    let mut out = Vec::new();
    for f in frames {
        for v in f.data() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|e| DataError::Io(format!("{}: {e}", path.display())))
}

pub fn manifest_to_jsonl(records: &[ManifestRecord]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r).expect("manifest records serialize"));
        s.push('\n');
    }
    s
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>, DataError> {
    let f = fs::File::open(path).map_err(|e| DataError::Io(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| DataError::Io(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord =
            serde_json::from_str(&line).map_err(|e| DataError::Format(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn read_vocabulary(path: &Path) -> Result<Vec<String>, DataError> {
    let text = fs::read_to_string(path).map_err(|e| DataError::Io(format!("{}: {e}", path.display())))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(str::to_string).collect())
}

/// A dataset directory loaded into memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub info: DatasetInfo,
    pub records: Vec<ManifestRecord>,
    pub vocabulary: Vec<String>,
    pub world: SyntheticWorld,
}

impl Dataset {
    pub fn from_parts(info: DatasetInfo, records: Vec<ManifestRecord>) -> Result<Self, DataError> {
        let vocabulary: Vec<String> = info.concepts.iter().flat_map(|c| [c.name.clone(), c.synonym.clone()]).collect();
        let world = SyntheticWorld::new(info.spec.clone(), info.seed)?;
        let ds = Self {
            info,
            records,
            vocabulary,
            world,
        };
        ds.validate()?;
        Ok(ds)
    }

    /// Generates a dataset in memory.
    pub fn synthetic(spec: &SyntheticDatasetSpec, seed: u64) -> Result<Self, DataError> {
        let (info, records) = super::synth::generate_synthetic_dataset(spec, seed)?;
        Self::from_parts(info, records)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let vocab: BTreeSet<&str> = self.vocabulary.iter().map(String::as_str).collect();
        let mut ids = HashMap::new();
        for r in &self.records {
            if let Some(prev) = ids.insert(r.video_id.as_str(), r.split) {
                return Err(DataError::Format(format!("video {} listed twice ({} and {})", r.video_id, prev.as_str(), r.split.as_str())));
            }
            if let Some(l) = r.labels.iter().find(|l| !vocab.contains(l.as_str())) {
                return Err(DataError::UnknownLabel(l.clone()));
            }
        }
        Ok(())
    }

    /// Writes `manifest.jsonl`, `vocabulary.txt` and `dataset.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), DataError> {
        fs::create_dir_all(dir).map_err(|e| DataError::Io(e.to_string()))?;
        let io = |p: &Path, s: String| fs::write(p, s).map_err(|e| DataError::Io(format!("{}: {e}", p.display())));
        io(&dir.join(MANIFEST_FILE), manifest_to_jsonl(&self.records))?;
        io(&dir.join(VOCABULARY_FILE), self.vocabulary.iter().map(|v| format!("{v}\n")).collect())?;
        io(&dir.join(DATASET_FILE), serde_json::to_string_pretty(&self.info).expect("info serializes") + "\n")?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, DataError> {
        let info_text = fs::read_to_string(dir.join(DATASET_FILE)).map_err(|e| DataError::Io(format!("{}: {e}", dir.display())))?;
        let info: DatasetInfo = serde_json::from_str(&info_text).map_err(|e| DataError::Format(e.to_string()))?;
        let records = read_manifest(&dir.join(MANIFEST_FILE))?;
        let mut ds = Self::from_parts(info, records)?;
        let vocab_path = dir.join(VOCABULARY_FILE);
        if vocab_path.exists() {
            ds.vocabulary = read_vocabulary(&vocab_path)?;
            ds.validate()?;
        }
        Ok(ds)
    }

    pub fn split(&self, split: Split) -> Vec<&ManifestRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    /// Label names evaluated on a split: synonyms for the open split, names
    /// otherwise. Closed splits also carry vocabulary entries that belong to
    /// no concept, such as labels merged in by the labeling pipeline.
    pub fn split_vocabulary(&self, split: Split) -> Vec<String> {
        let mut out: Vec<String> = self
            .info
            .concepts
            .iter()
            .map(|c| if split == Split::TestOpen { c.synonym.clone() } else { c.name.clone() })
            .collect();
        if split != Split::TestOpen {
            let known: BTreeSet<&str> = self.info.concepts.iter().flat_map(|c| [c.name.as_str(), c.synonym.as_str()]).collect();
            out.extend(self.vocabulary.iter().filter(|v| !known.contains(v.as_str())).cloned());
        }
        out
    }

    /// Labels of temporal concepts under both names.
    pub fn temporal_labels(&self) -> BTreeSet<String> {
        self.info
            .concepts
            .iter()
            .filter(|c| c.kind == ConceptKind::Temporal)
            .flat_map(|c| [c.name.clone(), c.synonym.clone()])
            .collect()
    }

    pub fn frames(&self, record: &ManifestRecord) -> Result<Vec<Mat>, DataError> {
        self.world.materialize(record)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn write_load_round_trip_is_byte_identical() {
        let ds = Dataset::synthetic(&SyntheticDatasetSpec::default(), 7).unwrap();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        ds.write(a.path()).unwrap();
        let back = Dataset::load(a.path()).unwrap();
        back.write(b.path()).unwrap();
        for f in [MANIFEST_FILE, VOCABULARY_FILE, DATASET_FILE] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
        }
        assert_eq!(back.records, ds.records);
        let r = &ds.records[3];
        assert!(ds.frames(r).unwrap().iter().zip(back.frames(r).unwrap()).all(|(x, y)| x.bit_eq(&y)));
    }

    #[test]
    fn same_seed_same_bytes_other_seed_differs() {
        let spec = SyntheticDatasetSpec::default();
        let a = manifest_to_jsonl(&Dataset::synthetic(&spec, 1).unwrap().records);
        let b = manifest_to_jsonl(&Dataset::synthetic(&spec, 1).unwrap().records);
        let c = manifest_to_jsonl(&Dataset::synthetic(&spec, 2).unwrap().records);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn splits_are_disjoint_and_vocabularies_split_by_name() {
        let ds = Dataset::synthetic(&SyntheticDatasetSpec::default(), 0).unwrap();
        let train = ds.split_vocabulary(Split::Train);
        let open = ds.split_vocabulary(Split::TestOpen);
        assert!(open.iter().all(|o| !train.contains(o)));
        let tok = crate::backbones::Tokenizer::from_wordbank();
        assert!(open.iter().all(|o| tok.all_known(o)));
        assert_eq!(ds.temporal_labels().len(), 12);
    }

    #[test]
    fn unknown_labels_are_rejected() {
        let mut ds = Dataset::synthetic(&SyntheticDatasetSpec::default(), 0).unwrap();
        ds.records[0].labels.push("flying saucer".into());
        assert!(matches!(ds.validate(), Err(DataError::UnknownLabel(_))));
    }

    #[test]
    fn frame_files_round_trip_through_f32() {
        let ds = Dataset::synthetic(&SyntheticDatasetSpec::default(), 0).unwrap();
        let frames = ds.frames(&ds.records[0]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.f32");
        write_frame_file(&p, &frames).unwrap();
        let back = read_frame_file(p.to_str().unwrap(), frames.len(), 16, 8).unwrap();
        for (a, b) in frames.iter().zip(&back) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(*y, *x as f32 as f64);
            }
        }
        assert!(read_frame_file(p.to_str().unwrap(), frames.len() + 1, 16, 8).is_err());
    }
}
