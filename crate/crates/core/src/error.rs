use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("box {x},{y},{w},{h} does not fit a {frame_w}x{frame_h} frame")]
    Bounds {
        x: u32,
        y: u32,
        w: u32,
        h: u32,
        frame_w: u32,
        frame_h: u32,
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed ROI message at byte {offset}: {reason}")]
    MalformedMessage { offset: usize, reason: String },

    #[error("message needs {required} bits but the frame holds {available}")]
    Capacity { required: usize, available: usize },

    #[error("corrupt stego stream: {0}")]
    CorruptStream(String),

    #[error("training diverged: term `{term}` is not finite{}", step.map(|s| format!(" at step {s}")).unwrap_or_default())]
    Divergence { term: String, step: Option<usize> },

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("statistic undefined: {0}")]
    UndefinedStatistic(String),

    #[error("detector failed on frame {frame_id}: {reason}")]
    Detector { frame_id: u64, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
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

    pub(crate) fn checkpoint(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Checkpoint {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
