use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("missing file: {0}")]
    MissingFile(PathBuf),

    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported data type: {0}")]
    UnsupportedType(String),

    #[error("estimation error: {0}")]
    Estimation(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path)
        } else {
            Error::Io { path, source }
        }
    }

    /// Stable machine-readable tag, used by the CLI error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::MissingFile(_) => "missing_file",
            Error::Format(_) => "format",
            Error::UnsupportedType(_) => "unsupported_type",
            Error::Estimation(_) => "estimation",
            Error::Checkpoint(_) => "checkpoint",
            Error::Schema(_) => "schema",
            Error::Shape(_) => "shape",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::NonFinite(_) => "non_finite",
            Error::Json(_) => "json",
        }
    }

    /// Process exit code; each error class maps to a distinct value.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } => 10,
            Error::MissingFile(_) => 11,
            Error::Format(_) => 12,
            Error::UnsupportedType(_) => 13,
            Error::Estimation(_) => 14,
            Error::Checkpoint(_) => 15,
            Error::Schema(_) => 16,
            Error::Shape(_) => 17,
            Error::InvalidArgument(_) => 18,
            Error::NonFinite(_) => 19,
            Error::Json(_) => 20,
        }
    }
}
