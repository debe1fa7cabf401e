use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch in {dim}: expected {expected}, got {actual}")]
    ShapeMismatch {
        op: &'static str,
        dim: String,
        expected: String,
        actual: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite gradient in layer {layer} (parameter {param})")]
    NonFiniteGradient { layer: String, param: String },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("constraint violation: {0}")]
    ConstraintViolation(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{} missing file(s), first: {}", .0.len(), .0.first().map(|p| p.display().to_string()).unwrap_or_default())]
    MissingFiles(Vec<PathBuf>),

    #[error("decoder failed for {path}: {message}")]
    Decoder { path: PathBuf, message: String },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("manifest audit failed with {count} violation(s):\n{details}")]
    Audit { count: usize, details: String },

    #[error("image {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("spec file: {0}")]
    SpecFile(String),
}

impl Error {
    pub(crate) fn shape(
        op: &'static str,
        dim: impl Into<String>,
        expected: impl std::fmt::Display,
        actual: impl std::fmt::Display,
    ) -> Self {
        Error::ShapeMismatch {
            op,
            dim: dim.into(),
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the numerics (NaN/Inf, gradient checks), as
    /// opposed to bad input data.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFiniteGradient { .. } | Error::NonFinite(_) | Error::ConstraintViolation(_)
        )
    }
}
