use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("point is behind the camera (camera-frame z = {z})")]
    PointBehindCamera { z: f64 },

    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),

    #[error("perspective-three-point problem has no real solution")]
    NoRealSolution,

    #[error("every reference-point subset is degenerate")]
    AllSubsetsDegenerate,

    #[error("no pedestrian ever enters the camera field of view")]
    CameraSeesNothing,

    #[error("could not place pedestrians with the requested separation of {0} m")]
    SeparationUnsatisfiable(f64),

    #[error("malformed record at line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },

    #[error("batch normalization needs at least 2 samples in training mode, got {0}")]
    BatchTooSmall(usize),

    #[error("training diverged at epoch {epoch}: non-finite {what}")]
    DivergenceDetected { epoch: usize, what: &'static str },

    #[error("no camera detections available for association")]
    NoCameraDetections,

    #[error("empty input")]
    EmptyInput,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
