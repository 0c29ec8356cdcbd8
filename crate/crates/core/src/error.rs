//! Crate-wide error type.

use alloc::string::String;
use alloc::vec::Vec;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid axis {axis} for tensor of rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward was already run on this tape")]
    BackwardConsumed,
    #[error("loss is not connected to any differentiable leaf")]
    DetachedGraph,
    #[error("no gradient for parameter {0}")]
    MissingGrad(String),
    #[error("loss term {term} is not finite ({value})")]
    NonFinite { term: &'static str, value: f64 },
    #[error("cross-entropy target has no valid pixels")]
    AllPixelsIgnored,
    #[error("boundary mask selects no positions")]
    EmptyContext,
    #[error("index {index} out of range ({len} positions)")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("reference feature has zero norm")]
    ZeroNormReference,
    #[error("confusion matrix is empty")]
    EmptyConfusion,
    #[error("checkpoint has {expected} classes, config has {actual}")]
    ClassCountMismatch { expected: usize, actual: usize },
}

pub type Result<T> = core::result::Result<T, Error>;
