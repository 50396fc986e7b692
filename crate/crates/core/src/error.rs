//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty embedding list")]
    EmptyInput,

    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },

    #[error("zero-norm vector cannot be scored with cosine similarity")]
    ZeroNorm,

    #[error("cohort size k={k} out of range for bank size {c} (need 1 <= k <= C)")]
    InvalidCohortSize { k: usize, c: usize },

    #[error("bank has {n_sub} sub-centers; this operation requires exactly 1")]
    SubCentersUnsupported { n_sub: usize },

    #[error("embedding has no class index but one is required here")]
    MissingClassIndex,

    #[error("class index {class} out of range for bank with {c} speakers")]
    ClassOutOfRange { class: usize, c: usize },

    #[error("margin must be non-negative, got {0}")]
    NegativeMargin(f64),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("insufficient training data: {0}")]
    InsufficientData(String),

    #[error("non-finite value in {context}: training aborted")]
    NonFinite { context: String },

    #[error("unknown utterance id `{0}`")]
    UnknownUtterance(String),

    #[error("unknown speaker `{0}` (not present in the impostor bank)")]
    UnknownSpeaker(String),

    #[error("duplicate utterance id `{0}`")]
    DuplicateUtterance(String),

    #[error("trial set needs both target and non-target trials")]
    SingleClass,

    #[error("score/label misalignment: {0}")]
    Misaligned(String),

    #[error("{path}: {kind} at byte {offset}")]
    Archive {
        path: String,
        kind: String,
        offset: u64,
    },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
