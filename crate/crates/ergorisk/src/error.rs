//! Crate-wide error type with an exit-code classification for the CLI.

use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad flags or flag combinations (exit 1).
    #[error("usage error: {0}")]
    Usage(String),

    /// A record could not be parsed; carries the 1-based line number.
    #[error("{path}:{line}: malformed record: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    /// Structurally wrong input (landmark count, header, table shape).
    #[error("schema error: {0}")]
    Schema(String),

    /// A value is out of its documented domain (non-finite, out of range).
    #[error("value error: {0}")]
    Value(String),

    /// Required landmarks are absent after visibility filtering.
    #[error("missing landmarks for {region}: absent indices {indices:?}")]
    MissingLandmarks {
        region: String,
        indices: Vec<usize>,
    },

    /// Zero-length segment at a joint; angle undefined.
    #[error("degenerate geometry at {joint}: zero-length segment")]
    DegenerateJoint { joint: String },

    /// Malformed configuration (tables, thresholds, model config).
    #[error("configuration error: {0}")]
    Config(String),

    /// NaN/Inf or failed numeric contract (exit 3).
    #[error("numeric fault: {0}")]
    Numeric(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 0 success, 1 usage, 2 data, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 1,
            Error::Numeric(_) => 3,
            _ => 2,
        }
    }
}
