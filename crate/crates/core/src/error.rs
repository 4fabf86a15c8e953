use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("unknown language `{0}`")]
    UnknownLanguage(String),

    #[error("language `{0}` is already registered")]
    DuplicateLanguage(String),

    #[error("stage error: {0}")]
    Stage(String),

    #[error("mixed-language batch: {0}")]
    MixedLanguage(String),

    #[error("index {index} out of range (len {len})")]
    OutOfRange { index: usize, len: usize },

    #[error("unknown id `{0}`")]
    UnknownId(String),

    #[error("duplicate id `{0}`")]
    DuplicateId(String),

    #[error("parse error at {path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("corrupt or unsupported file format: {0}")]
    Format(String),

    #[error("unknown metric `{name}` (supported: {supported})")]
    UnknownMetric { name: String, supported: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Stable machine-readable code, printed as the prefix of CLI errors.
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidConfig(_) => "E_CONFIG",
            Error::DimensionMismatch { .. } => "E_DIM",
            Error::EmptyInput(_) => "E_EMPTY",
            Error::NonFinite(_) => "E_NONFINITE",
            Error::UnknownLanguage(_) => "E_LANG",
            Error::DuplicateLanguage(_) => "E_LANG_DUP",
            Error::Stage(_) => "E_STAGE",
            Error::MixedLanguage(_) => "E_MIXED_LANG",
            Error::OutOfRange { .. } => "E_RANGE",
            Error::UnknownId(_) => "E_UNKNOWN_ID",
            Error::DuplicateId(_) => "E_DUP_ID",
            Error::Parse { .. } => "E_PARSE",
            Error::Format(_) => "E_FORMAT",
            Error::UnknownMetric { .. } => "E_METRIC",
            Error::Io { .. } => "E_IO",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(expected: usize, actual: usize) -> Self {
        Error::DimensionMismatch { expected, actual }
    }
}
