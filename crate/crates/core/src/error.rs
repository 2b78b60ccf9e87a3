use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = GradError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum GradError {
    #[error("invalid coefficient: {0}")]
    InvalidCoefficient(f64),

    #[error("invalid action {action} at step {step}")]
    InvalidAction { step: usize, action: f64 },

    #[error("step index {t} out of range for horizon {horizon}")]
    StepOutOfRange { t: usize, horizon: usize },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("instance too large for brute force: {0} impressions (max {max})", max = crate::oracle::MAX_BRUTEFORCE)]
    InstanceTooLarge(usize),

    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: [usize; 2],
        right: [usize; 2],
    },

    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot([usize; 2]),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("sequence of length {len} exceeds context window {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("non-finite {component} loss: {value}")]
    NonFiniteLoss { component: &'static str, value: f64 },

    #[error("checkpoint error at {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("parameter {path}: expected shape {expected:?}, found {found:?}")]
    ParameterShape {
        path: String,
        expected: [usize; 2],
        found: [usize; 2],
    },

    #[error("missing parameter {0}")]
    MissingParameter(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
