use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the localization toolkit.
#[derive(Debug, Error)]
pub enum RelocError {
    #[error("point depth must be positive, got {0}")]
    NonPositiveDepth(f64),
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid pose: {0}")]
    InvalidPose(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("pixel {0} has no valid neighbor")]
    EmptyNeighborhood(usize),
    #[error("need at least {needed} correspondences, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("degenerate point configuration: {0}")]
    DegenerateConfiguration(String),
    #[error("{behind} of {total} points lie behind the camera")]
    BehindCamera { behind: usize, total: usize },
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("training diverged at epoch {epoch}")]
    DivergedTraining { epoch: usize },
    #[error("input is empty")]
    EmptyInput,
    #[error("frame has {got} valid correspondences, {needed} required")]
    TooFewCorrespondences { needed: usize, got: usize },
    #[error("hypothesis failed: {0}")]
    FailedHypothesis(Box<RelocError>),
    #[error("all {0} pose hypotheses failed")]
    AllHypothesesFailed(usize),
    #[error("scene covers only {visible:.3} of the image, {required:.3} required")]
    SceneNotVisible { visible: f64, required: f64 },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("labels must contain at least one positive and one negative")]
    DegenerateLabels,
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl RelocError {
    pub(crate) fn shape(expected: impl ToString, got: impl ToString) -> Self {
        RelocError::ShapeMismatch {
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        RelocError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        RelocError::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}

pub type Result<T, E = RelocError> = std::result::Result<T, E>;
