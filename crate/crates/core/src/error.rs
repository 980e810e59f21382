use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    InvalidShape { op: &'static str, msg: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward called on a graph that was already consumed")]
    GraphConsumed,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: u8, classes: usize },
    #[error("class {class} has zero voxels; class weights need every class present")]
    ZeroCount { class: usize },
    #[error("parameter {0} has no gradient")]
    MissingGradient(String),
    #[error("batchnorm {0}: eval mode requested before running statistics were initialized")]
    RunningStatsUninitialized(String),
    #[error("level {level}: extent {extent} is not divisible by {divisor}")]
    Divisibility {
        level: usize,
        extent: usize,
        divisor: usize,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid data: {0}")]
    Data(String),
    #[error("{path}: expected {expected} bytes, found {actual}")]
    LengthMismatch {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },
    #[error("unknown dtype {0:?}")]
    UnknownDtype(String),
    #[error("unsupported endianness tag {0:?}")]
    BadEndianness(String),
    #[error("missing checkpoint at {0}")]
    MissingCheckpoint(PathBuf),
    #[error("no cached stage-1 prediction for volume {0}")]
    MissingCache(String),
    #[error("no accepted patches to train on")]
    EmptyPatchSet,
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

    /// True for errors caused by a bad configuration rather than bad input data.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Divisibility { .. } | Error::MissingCheckpoint(_)
        )
    }
}
