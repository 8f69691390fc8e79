//! Error type shared by every module of the crate.

use std::path::PathBuf;

/// Result alias used throughout `ato_core`.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("unsupported version {found} (supported: {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u32),

    #[error("truncated payload: expected {expected} bytes, found {actual}")]
    Truncated { expected: u64, actual: u64 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite value in {what} at flat index {index}")]
    NonFinite { what: String, index: usize },

    #[error("invalid metadata: {0}")]
    Metadata(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("split too small: {0}")]
    SplitTooSmall(String),

    #[error("singular system: {0}")]
    Singular(String),

    #[error("fold underflow: {rows} rows cannot fill {folds} folds")]
    FoldUnderflow { rows: usize, folds: usize },

    #[error("out of range: {0}")]
    OutOfRange(String),

    #[error("degenerate statistic: {0}")]
    Degenerate(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable identifier, used by the CLI for one-line diagnostics.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::BadMagic { .. } => "bad_magic",
            Error::UnsupportedVersion { .. } => "unsupported_version",
            Error::UnsupportedDtype(_) => "unsupported_dtype",
            Error::Truncated { .. } => "truncated",
            Error::DimensionMismatch(_) => "dimension_mismatch",
            Error::NonFinite { .. } => "non_finite",
            Error::Metadata(_) => "metadata",
            Error::InvalidConfig(_) => "invalid_config",
            Error::SplitTooSmall(_) => "split_too_small",
            Error::Singular(_) => "singular",
            Error::FoldUnderflow { .. } => "fold_underflow",
            Error::OutOfRange(_) => "out_of_range",
            Error::Degenerate(_) => "degenerate",
            Error::Json(_) => "json",
        }
    }
}
