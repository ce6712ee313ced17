//! Error type shared across the crate.

use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to parse {what}: {detail}")]
    Parse { what: String, detail: String },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid mask: {0}")]
    InvalidMask(String),

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error(
        "cluster projection is rank deficient (|r_{index},{index}| = {value:e} < {threshold:e})"
    )]
    DegenerateProjection {
        index: usize,
        value: f64,
        threshold: f64,
    },

    #[error("dataset has no labels; clustering metrics are undefined")]
    MissingLabels,

    #[error("number of clusters is unknown: provide labels or a cluster count in the manifest")]
    MissingClusterCount,

    #[error("unsupported model file: {0}")]
    ModelFormat(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(what: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Parse {
            what: what.into(),
            detail: detail.into(),
        }
    }
}
