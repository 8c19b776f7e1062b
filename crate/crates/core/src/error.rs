//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: String,
        expected: String,
        actual: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value in {stage} at sample {index}")]
    NonFinite { stage: String, index: usize },

    #[error("non-finite state during sampling at step {step}")]
    NonFiniteSample { step: usize },

    #[error("training diverged at step {step}: loss {loss} exceeds 10x initial for 500 steps")]
    Diverged { step: usize, loss: f64 },

    #[error("backbone is frozen; parameter update rejected")]
    Frozen,

    #[error("backbone must be frozen before adapter training")]
    NotFrozen,

    #[error("frozen backbone checksum changed during {stage}")]
    ChecksumViolation { stage: String },

    #[error("unknown layer index {0} in adapter set")]
    UnknownLayer(usize),

    #[error("adapter already attached to layer {0}")]
    DoubleAttach(usize),

    #[error("adapter shape mismatch on layer {layer}: {detail}")]
    AdapterShape { layer: usize, detail: String },

    #[error("archive magic mismatch (not a TCLA file)")]
    ArchiveMagic,

    #[error("archive truncated: {0}")]
    ArchiveTruncated(String),

    #[error("archive offsets overlap or are non-contiguous for tensor {0}")]
    ArchiveOffsets(String),

    #[error("archive header is not valid JSON: {0}")]
    ArchiveHeader(String),

    #[error("tensor {0} missing from archive")]
    MissingTensor(String),

    #[error("checkpoint not found: {0}")]
    MissingCheckpoint(String),

    #[error("rank-deficient system: Gram matrix not solvable even with ridge")]
    RankDeficient,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image encoding error: {0}")]
    Image(String),
}

pub type Result<T> = std::result::Result<T, Error>;
