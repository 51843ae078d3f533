//! Error taxonomy shared across the crate.
//!
//! Variants map onto the CLI exit-code policy: `Numeric` and `Contract`
//! indicate a failed run (exit 1), everything else is a usage or input
//! problem (exit 2).

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor/matrix dimensions do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A computation produced NaN/Inf, or training diverged.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// An index (e.g. a class label) is out of range.
    #[error("index error: {0}")]
    Index(String),

    /// Invalid configuration value.
    #[error("config error: {0}")]
    Config(String),

    /// Missing, empty, or otherwise unusable input data.
    #[error("data error: {0}")]
    Data(String),

    /// An API contract was violated (wrong call order, reused tape, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A file failed to parse; names the offending file and line.
    #[error("parse error at {file}:{line}: {msg}")]
    Parse {
        file: String,
        line: usize,
        msg: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures of the run itself rather than of its inputs.
    pub fn is_runtime_failure(&self) -> bool {
        matches!(self, Error::Numeric(_) | Error::Contract(_))
    }

    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
