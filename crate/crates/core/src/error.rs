use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error at line {line}: {message}")]
    Format { line: usize, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    /// A caller broke a documented precondition (shape, range, ordering).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("topology mismatch at mesh {index}: {message}")]
    TopologyMismatch { index: usize, message: String },

    #[error("simplification stalled at {achieved} vertices (target {target})")]
    Simplification { achieved: usize, target: usize },

    #[error("gimbal lock: |R[2][0]| = {0} is too close to 1")]
    GimbalLock(f64),

    #[error("non-finite value in loss term `{term}`")]
    NonFinite { term: String },

    #[error("checkpoint parse error at byte {offset}: {message}")]
    Checkpoint { offset: usize, message: String },

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("synthetic generation error: {0}")]
    Generation(String),

    #[error("fold {fold} failed: {source}")]
    Fold {
        fold: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
