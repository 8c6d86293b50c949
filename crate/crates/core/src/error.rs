//! One error type for the whole crate; variants carry enough context to
//! diagnose a failure without a debugger.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: invalid shape {shape:?}: {why}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        why: String,
    },

    #[error("{op}: invalid argument: {why}")]
    InvalidArg { op: &'static str, why: String },

    #[error("{op}: operands belong to different graphs")]
    GraphMismatch { op: &'static str },

    #[error("{context}: non-finite value encountered")]
    NonFinite { context: String },

    #[error("backward requires a scalar output, got shape {shape:?}")]
    NonScalarOutput { shape: Vec<usize> },

    #[error("backward: output has no gradient path to any trainable leaf")]
    NoGradPath,

    #[error("parameter store: {0}")]
    ParamStore(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("environment: {0}")]
    Env(String),

    #[error("sampling: {0}")]
    Sampling(String),

    #[error("training aborted: {0}")]
    Training(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
