//! Word bank, synthetic dataset generator and manifest formats.

pub mod manifest;
pub mod synth;
pub mod wordbank;

pub use manifest::{ConceptInfo, Dataset, DatasetInfo, FrameSource, ManifestRecord, Split};
pub use synth::{generate_synthetic_dataset, SyntheticDatasetSpec, SyntheticWorld};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("requested {requested} concepts but the word bank holds {static_available} static and {temporal_available} temporal")]
    Capacity {
        requested: usize,
        static_available: usize,
        temporal_available: usize,
    },
    #[error("invalid dataset spec: {0}")]
    Spec(String),
    #[error("label {0:?} is not in the vocabulary")]
    UnknownLabel(String),
    #[error("malformed dataset: {0}")]
    Format(String),
    #[error("io: {0}")]
    Io(String),
}
