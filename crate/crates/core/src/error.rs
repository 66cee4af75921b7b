use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// What went wrong with one input line of a flow stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RecordErrorKind {
    Syntax,
    MissingField,
    InvalidField,
    PortOutOfRange,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordError {
    pub line: usize,
    pub kind: RecordErrorKind,
    pub message: String,
}

impl std::fmt::Display for RecordError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{} invalid record(s); first: {}", .0.len(), .0[0])]
    Records(Vec<RecordError>),
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("no informative features")]
    NoInformativeFeatures,
    #[error("invalid dataset: {0}")]
    Dataset(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("unknown PII type {0:?}")]
    UnknownType(String),
    #[error("not enough samples: {0}")]
    TooFewSamples(String),
    #[error("unknown feature {0:?}")]
    UnknownFeature(String),
    #[error("embedding provider failed at sample {sample}, feature {feature:?}: {message}")]
    Provider {
        sample: usize,
        feature: String,
        message: String,
    },
    #[error("remote embedding: {0}")]
    Remote(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("non-finite loss at epoch {0}")]
    NonFiniteLoss(usize),
    #[error("numerical: {0}")]
    Numerical(String),
    #[error("missing {what}: {}", .path.display())]
    MissingInput { what: String, path: PathBuf },
    #[error(transparent)]
    Autograd(#[from] piiscan_autograd::AutogradError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
