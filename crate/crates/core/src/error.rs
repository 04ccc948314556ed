use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {reason}")]
    InvalidShape { op: &'static str, reason: String },
    #[error("division by zero in {op}")]
    DivisionByZero { op: &'static str },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("{op}: empty reduction")]
    EmptyReduction { op: &'static str },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward already ran on this tape; reset gradients first")]
    BackwardTwice,
    #[error("no differentiable leaves")]
    NoDifferentiableLeaves,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("unknown {kind}: {value}")]
    Unknown { kind: &'static str, value: String },
    #[error("idx parse error: {0}")]
    Idx(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("non-finite loss at batch {batch}")]
    NonFiniteLoss { batch: usize },
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),
    #[error("{path}: {cause}")]
    Io { path: PathBuf, cause: std::io::Error },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, cause: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            cause,
        }
    }
}
