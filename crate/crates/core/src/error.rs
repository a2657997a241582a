use thiserror::Error;

/// Errors raised by the detection core.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid deltas: implied box size ({0}, {1}, {2}) is not positive")]
    InvalidDeltas(f64, f64, f64),
    #[error("invalid box: {0}")]
    InvalidBox(String),
    #[error("point projects behind the camera (denominator {0:e})")]
    BehindCamera(f64),
    #[error("invalid camera map: psi7, psi8 and psi9 are all zero")]
    InvalidCamera,
    #[error("axis-aligned IoU requires zero yaw, got {0}")]
    WrongVariant(f64),
    #[error("stage index {stage} out of range 1..={num_stages}")]
    StageOutOfRange { stage: usize, num_stages: usize },
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("feature dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("length mismatch: {what} ({left} vs {right})")]
    Misaligned {
        what: &'static str,
        left: usize,
        right: usize,
    },
    #[error("could not place box {index} after {attempts} attempts")]
    Placement { index: usize, attempts: usize },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("predictor output violates contract: {0}")]
    PredictorOutput(String),
    #[error("training diverged at step {step}")]
    Diverged { step: usize },
    #[error("unsupported schema version {found} (expected major {expected})")]
    SchemaVersion { found: String, expected: u32 },
}

pub type Result<T> = std::result::Result<T, Error>;
