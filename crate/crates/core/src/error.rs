use std::io;

use thiserror::Error;

/// Errors produced anywhere in the detection pipeline.
#[derive(Debug, Error)]
pub enum RaidError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("not a {expected} file")]
    BadMagic { expected: &'static str },

    #[error("unexpected EOF while reading {context}")]
    UnexpectedEof { context: &'static str },

    #[error("corrupt payload: {0}")]
    CorruptPayload(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("degenerate vector: {0}")]
    DegenerateVector(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("incompatible configuration: {0}")]
    IncompatibleConfiguration(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("insufficient candidates: needed {needed}, found {found}")]
    InsufficientCandidates { needed: usize, found: usize },

    #[error("non-finite gradient in tensor `{tensor}`")]
    NonFiniteGradient { tensor: String },
}

pub type Result<T, E = RaidError> = std::result::Result<T, E>;

pub(crate) fn ensure(cond: bool, err: impl FnOnce() -> RaidError) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(err())
    }
}
