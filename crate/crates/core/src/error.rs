use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("vocabulary error: {0}")]
    Vocabulary(String),

    #[error("stage error: {0}")]
    Stage(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("compatibility error: expected {expected}, found {found}")]
    Compatibility { expected: String, found: String },

    #[error("knowledge base is sealed")]
    Sealed,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    /// Short machine-readable category, stable across releases.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Domain(_) => "domain",
            Error::Evaluation(_) => "evaluation",
            Error::Format(_) => "format",
            Error::Integrity(_) => "integrity",
            Error::Schema(_) => "schema",
            Error::Vocabulary(_) => "vocabulary",
            Error::Stage(_) => "stage",
            Error::Training(_) => "training",
            Error::Alignment(_) => "alignment",
            Error::Compatibility { .. } => "compatibility",
            Error::Sealed => "sealed",
            Error::Io { .. } => "io",
            Error::Json { .. } => "format",
        }
    }

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
