use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    #[error("index ({c}, {y}, {x}) out of bounds for {channels}x{height}x{width} feature map")]
    OutOfBounds {
        c: usize,
        y: usize,
        x: usize,
        channels: usize,
        height: usize,
        width: usize,
    },

    #[error("non-finite value {0}")]
    NonFinite(f32),

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("weight shape error in layer {layer}: {msg}")]
    WeightShape { layer: usize, msg: String },

    #[error("transform error: {0}")]
    Transform(String),

    #[error("offload backend {0:?} is already registered")]
    DuplicateBackend(String),

    #[error("no offload backend registered for library {name:?}{}", line.map(|l| format!(" (config line {l})")).unwrap_or_default())]
    UnresolvedBackend { name: String, line: Option<usize> },

    #[error("offload backend init failed: {0}")]
    BackendInit(String),

    #[error("offload contract violation: {0}")]
    Contract(String),

    #[error("stage {stage:?} failed on frame {seq}: {msg}")]
    StageFailed { stage: String, seq: u64, msg: String },

    #[error("image error: {0}")]
    Image(String),

    #[error("{}: {source}", path.display())]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::File {
            path: path.into(),
            source,
        }
    }
}
