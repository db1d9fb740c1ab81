//! Deterministic differentiable substrate: matrices, a reverse-mode tape,
//! layers, AdamW, finite-difference checks and checkpoints.

pub mod checkpoint;
pub mod gradcheck;
pub mod init;
pub mod layers;
pub mod mat;
pub mod optim;
pub mod param;
pub mod tape;

pub use checkpoint::{decode_records, encode_records, encode_store, load_into, store_hash, CheckpointRecord};
pub use gradcheck::{finite_diff_grad_check, top_gradient_coords, GradCheckReport};
pub use init::{derive_seed, seeded_init, seeded_normal, InitScheme};
pub use layers::{AttentionSpec, InitOpts, LayerNorm, Linear, Mlp, MultiHeadAttention, TransformerBlock};
pub use mat::Mat;
pub use optim::{AdamW, AdamWConfig, WarmupCosine};
pub use param::{ParamGroup, ParamId, ParamStore, Parameter};
pub use tape::{AttnBlock, AttnLayout, Gradients, Precision, Tape, Var};

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("degenerate mask: a query row has no visible key")]
    DegenerateMask,
    #[error("non-finite activations in {0}")]
    NonFinite(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("duplicate parameter name {0}")]
    DuplicateParameter(String),
    #[error("parameter {0} is frozen")]
    FrozenParameter(String),
    #[error("loss not reproducible")]
    LossNotReproducible,
    #[error("learning rate must be positive, got {0}")]
    InvalidLearningRate(f64),
    #[error("unknown init scheme {0:?}")]
    UnknownInitScheme(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
