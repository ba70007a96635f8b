use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Broad error class, used by front ends to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Validation,
    Numerical,
    Io,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    DimensionMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("non-finite entry at index {index}")]
    NonFinite { index: usize },
    #[error("invalid shape {rows}x{cols} with {len} elements")]
    InvalidShape { rows: usize, cols: usize, len: usize },
    #[error("rank {k} out of range 1..={max}")]
    RankOutOfRange { k: usize, max: usize },
    #[error("SVD did not converge after {sweeps} sweeps (residual {residual:e})")]
    NoConvergence { sweeps: usize, residual: f64 },
    #[error("reference matrix has zero Frobenius norm")]
    ZeroNorm,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("unknown preset `{0}`")]
    UnknownPreset(String),
    #[error("token id {id} out of range for vocab {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("sequence length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("target ratio {target} infeasible; smallest achievable ratio is {floor}")]
    Infeasible { target: f64, floor: f64 },
    #[error("allocator not applicable: {0}")]
    InapplicableAllocator(String),
    #[error("missing tensor `{0}`")]
    MissingTensor(String),
    #[error("tensor `{name}` has shape {found:?}, expected {expected:?}")]
    TensorShape {
        name: String,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("weights blob length {found} does not match manifest ({expected} bytes)")]
    BlobLength { expected: u64, found: u64 },
    #[error("checksum mismatch: manifest {expected}, computed {found}")]
    Checksum { expected: String, found: String },
    #[error("container format: {0}")]
    Format(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::NoConvergence { .. } | Error::NonFinite { .. } | Error::ZeroNorm => {
                ErrorClass::Numerical
            }
            Error::Io { .. } => ErrorClass::Io,
            _ => ErrorClass::Validation,
        }
    }

    /// Short machine-readable tag for structured error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::NonFinite { .. } => "non_finite",
            Error::InvalidShape { .. } => "invalid_shape",
            Error::RankOutOfRange { .. } => "rank_out_of_range",
            Error::NoConvergence { .. } => "no_convergence",
            Error::ZeroNorm => "zero_norm",
            Error::InvalidConfig(_) => "invalid_config",
            Error::UnknownPreset(_) => "unknown_preset",
            Error::TokenOutOfRange { .. } => "token_out_of_range",
            Error::SequenceTooLong { .. } => "sequence_too_long",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Infeasible { .. } => "infeasible",
            Error::InapplicableAllocator(_) => "inapplicable_allocator",
            Error::MissingTensor(_) => "missing_tensor",
            Error::TensorShape { .. } => "tensor_shape",
            Error::BlobLength { .. } => "blob_length",
            Error::Checksum { .. } => "checksum",
            Error::Format(_) => "format",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}
