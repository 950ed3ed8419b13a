use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("mesh has zero total surface area")]
    DegenerateMesh,
    #[error("invalid mesh: {0}")]
    InvalidMesh(String),
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("non-finite coordinate at point {0}")]
    NonFinitePoint(usize),
    #[error("viewpoint coincides with point {0}")]
    DegenerateView(usize),
    #[error("invalid pose: {0}")]
    InvalidPose(String),
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid depth image: {0}")]
    InvalidDepth(String),
    #[error("need more than {k} points for k-NN, got {points}")]
    TooFewPoints { k: usize, points: usize },
    #[error("channel mismatch: {left} vs {right}")]
    ChannelMismatch { left: usize, right: usize },
    #[error("batch normalization needs at least two points in train mode")]
    EmptyBatch,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("sinkhorn lambda must be positive, got {0}")]
    NonPositiveLambda(f64),
    #[error("ground-truth correspondence matrix has no entries")]
    EmptyGroundTruth,
    #[error("degenerate matches: {0}")]
    DegenerateMatches(String),
    #[error("empty input")]
    EmptyInput,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
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
    #[error("dataset manifest not found: {0}")]
    ManifestNotFound(PathBuf),
    #[error("corrupt dataset: {0}")]
    CorruptDataset(String),
    #[error("non-finite loss at iteration {iteration}")]
    NaNLoss { iteration: usize },
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
}
