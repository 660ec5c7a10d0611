use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("fat mask is empty; cannot estimate the background level")]
    EmptyFatMask,

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("invalid protocol: {0}")]
    Protocol(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: String, found: String },

    #[error("b-value {0} is not part of the stack protocol")]
    MissingBValue(f64),

    #[error("every protocol subset must keep b = 0")]
    B0Required,

    #[error("{distinct} distinct b-values cannot determine {required} free parameters")]
    UnderDetermined { distinct: usize, required: usize },

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("mask is empty")]
    EmptyMask,

    #[error("phantom geometry: {0}")]
    Geometry(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("training data contains a single class")]
    SingleClassTraining,

    #[error("too few cases: need at least {required}, got {got}")]
    TooFewCases { required: usize, got: usize },

    #[error("scored set contains a single class")]
    SingleClass,

    #[error("paired score sets carry different labels")]
    LabelMismatch,

    #[error("p-value {0} is outside [0, 1]")]
    InvalidP(f64),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format { path: path.into(), reason: reason.into() }
    }

    /// True for errors caused by bad user input or configuration rather than
    /// by the environment.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::Io { .. })
    }
}
