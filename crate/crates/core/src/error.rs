use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: missing column `{name}`")]
    MissingColumn { path: PathBuf, name: String },
    #[error("{path}:{line}: cannot parse `{value}` in column `{column}`")]
    BadValue {
        path: PathBuf,
        line: u64,
        column: String,
        value: String,
    },
    #[error("track {0}: frames are not contiguous")]
    NonContiguousFrames(i64),
    #[error("track {track_id}: lane id {lane_id} at frame {frame} is not a lane of the recording")]
    UnknownLaneId {
        track_id: i64,
        frame: i64,
        lane_id: i64,
    },
    #[error("track {0}: no metadata row")]
    MissingTrackMeta(i64),
    #[error("invalid recording: {0}")]
    InvalidRecording(String),

    #[error("track {track_id}: lateral position unchanged across lane change at frame {frame}")]
    AmbiguousManeuver { track_id: i64, frame: i64 },
    #[error("empty input")]
    EmptyInput,

    #[error("driving direction must be 1 or 2, got {0}")]
    BadDirection(i64),
    #[error("track {track_id} has no state at frame {frame}")]
    MissingFrame { track_id: i64, frame: i64 },
    #[error("neighbor track {0} is referenced but absent from the recording")]
    MissingTrack(i64),

    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("batch norm needs at least 2 samples in train mode, got {0}")]
    BatchTooSmall(usize),
    #[error("label {0} is not a class index")]
    BadLabel(usize),
    #[error("backward needs a scalar loss, got shape {0:?}")]
    GraphNotScalar(Vec<usize>),
    #[error("{features} features cannot be split into {channels} channels")]
    IndivisibleChannels { features: usize, channels: usize },
    #[error("{heads} heads do not fit in embedding size {d_emb}")]
    TooManyHeads { d_emb: usize, heads: usize },
    #[error("unknown model configuration `{0}`")]
    UnknownConfig(String),

    #[error("training diverged at epoch {0} (non-finite loss)")]
    Diverged(usize),
    #[error("no samples to evaluate")]
    EmptyData,
    #[error("confusion matrix is empty")]
    EmptyMatrix,
    #[error("histogram bin width must be positive and finite, got {0}")]
    BadBinWidth(f64),

    #[error("invalid synthetic spec: {0}")]
    SpecInvalid(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::Io { path, source }
    }

    pub(crate) fn csv(path: impl Into<PathBuf>) -> impl FnOnce(csv::Error) -> Error {
        let path = path.into();
        move |source| Error::Csv { path, source }
    }

    pub(crate) fn json(path: impl Into<PathBuf>) -> impl FnOnce(serde_json::Error) -> Error {
        let path = path.into();
        move |source| Error::Json { path, source }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Error {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }
}
