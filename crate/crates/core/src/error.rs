use std::path::PathBuf;

/// Errors raised anywhere in the pipeline.
///
/// Every variant maps onto a short machine-readable category (see
/// [`Error::category`]) which the command-line driver prints on failure.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed header: {reason}")]
    Header { path: PathBuf, reason: String },
    #[error("{path}: payload holds {found} bytes, header declares {expected}")]
    SizeMismatch {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("{path}: non-finite value at element {index}")]
    NonFinite { path: PathBuf, index: usize },
    #[error("invalid volume: {0}")]
    InvalidVolume(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid dataset: {0}")]
    Dataset(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("metric undefined: {0}")]
    Metric(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("training: {0}")]
    Training(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable one-word category used in CLI diagnostics.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Header { .. } | Error::SizeMismatch { .. } | Error::NonFinite { .. } => "format",
            Error::InvalidVolume(_) => "volume",
            Error::Shape(_) => "shape",
            Error::Config(_) => "config",
            Error::Dataset(_) => "dataset",
            Error::InvalidInput(_) => "input",
            Error::Metric(_) => "metric",
            Error::Checkpoint(_) => "checkpoint",
            Error::Training(_) => "training",
            Error::Json(_) => "format",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
