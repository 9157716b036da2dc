use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid shape for {op}: {detail}")]
    InvalidShape { op: &'static str, detail: String },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("backward already ran on this graph; build a new graph for another pass")]
    BackwardAlreadyRun,

    #[error("invalid model config: {0}")]
    Config(String),

    #[error("unknown direction code {code} at frame {frame}, pixel ({row}, {col})")]
    IllegalDirectionCode {
        code: u8,
        frame: usize,
        row: usize,
        col: usize,
    },

    #[error("invalid direction table: {0}")]
    DirectionTable(String),

    #[error("bad magic in {what}: expected {expected:?}, found {found:?}")]
    BadMagic {
        what: &'static str,
        expected: [u8; 4],
        found: [u8; 4],
    },

    #[error("unsupported {what} version {version}")]
    UnsupportedVersion { what: &'static str, version: u32 },

    #[error("truncated {what}: expected {expected} bytes, found {found}")]
    Truncated {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("need at least {needed} frames, day has {available}")]
    TooFewFrames { needed: usize, available: usize },

    #[error("translation offset ({dx}, {dy}) exceeds maximum {max}")]
    OffsetTooLarge { dx: i64, dy: i64, max: usize },

    #[error("validation loss is not finite ({0}); training aborted")]
    NonFiniteLoss(f64),

    #[error("{0}")]
    Invalid(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn invalid_shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidShape {
            op,
            detail: detail.into(),
        }
    }
}
