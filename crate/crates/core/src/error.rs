use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o failure at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error("malformed descriptor {path}: {reason}")]
    Descriptor { path: PathBuf, reason: String },

    #[error("shape mismatch in {what}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        what: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("input size {dims:?} must be divisible by {factor}; pad the input first")]
    PaddingRequired { dims: Vec<usize>, factor: usize },

    #[error("missing modality: {0}")]
    MissingModality(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path)
        } else {
            Error::Io { path, source }
        }
    }

    /// Short machine-readable category, used by the CLI's error line.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::MissingFile(_) => "missing-file",
            Error::Descriptor { .. } => "descriptor",
            Error::ShapeMismatch { .. } => "shape-mismatch",
            Error::Invariant(_) => "invariant",
            Error::InvalidArgument(_) => "invalid-argument",
            Error::Config(_) => "config",
            Error::PaddingRequired { .. } => "padding-required",
            Error::MissingModality(_) => "missing-modality",
            Error::UndefinedMetric(_) => "undefined-metric",
            Error::Checkpoint { .. } => "checkpoint",
        }
    }
}
