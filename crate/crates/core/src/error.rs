use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("degenerate softmax row {row}: every position is masked")]
    DegenerateRow { row: usize },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("function is not deterministic: repeated evaluations differ ({first} vs {second})")]
    NonDeterministic { first: f64, second: f64 },
    #[error("invalid input: {0}")]
    Input(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("no target positions to score")]
    EmptyTarget,
    #[error("segment `{0}` is empty for this sequence")]
    EmptySegment(&'static str),
    #[error("zero variance in correlation input")]
    DegenerateVariance,
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
