use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("missing manifest: {0}")]
    MissingManifest(PathBuf),

    #[error("invalid manifest: {0}")]
    Manifest(String),

    #[error("row mismatch in {payload}: expected {expected} rows, found {found}")]
    RowMismatch {
        payload: String,
        expected: usize,
        found: usize,
    },

    #[error("non-finite value in {payload} at row {row}, column {col}")]
    NonFinite {
        payload: String,
        row: usize,
        col: usize,
    },

    #[error("unknown layout_tag {0:?}")]
    UnknownLayout(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("empty database: {0}")]
    EmptyDatabase(String),

    #[error("malformed row {line} in {path}: {content:?}")]
    MalformedRow {
        path: PathBuf,
        line: usize,
        content: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("training diverged: {0}")]
    Diverged(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
