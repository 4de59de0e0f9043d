use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{file}:{line}: {message}")]
    Malformed { file: String, line: usize, message: String },

    #[error("dangling reference in triples: query `{query_id}` / document `{doc_id}` not found")]
    DanglingReference { query_id: String, doc_id: String },

    #[error("duplicate {kind} id `{id}`")]
    DuplicateId { kind: &'static str, id: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("token id {id} out of range for vocabulary of size {size}")]
    TokenOutOfRange { id: u32, size: usize },

    #[error("empty token sequence")]
    EmptyTokens,

    #[error("cosine similarity undefined: zero-norm vector with epsilon = 0")]
    Singularity,

    #[error("label {label} outside 1..={classes}")]
    InvalidLabel { label: u8, classes: usize },

    #[error("insufficient candidates: requested {requested}, only {available} available")]
    InsufficientCandidates { requested: usize, available: usize },

    #[error("non-finite gradient at {0}")]
    NonFiniteGradient(String),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: u64, detail: String },

    #[error("gradient norm {norm} exceeds runtime ceiling {ceiling} at step {step}")]
    GradientBoundViolation { step: u64, norm: f64, ceiling: f64 },

    #[error("non-smooth similarity (epsilon = 0) refused inside the optimizer without force flag")]
    NonSmoothRefused,

    #[error("empty evaluation set")]
    EmptyEvaluation,

    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("finite-difference oracle failed: {0}")]
    Oracle(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
