use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("singular covariance")]
    SingularCovariance,

    #[error("covariance is not symmetric (max asymmetry {0:e})")]
    AsymmetricCovariance(f64),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid mixture: {0}")]
    InvalidMixture(String),

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("invalid step index {index} (schedule has {steps} steps)")]
    InvalidStepIndex { index: usize, steps: usize },

    #[error("degenerate data covariance")]
    DegenerateCovariance,

    #[error("training diverged at step {0}")]
    TrainingDiverged(usize),

    #[error("candidate explosion: {count} combinations exceeds cap {cap}")]
    CandidateExplosion { count: usize, cap: usize },

    #[error("no samples")]
    NoSamples,

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("incompatible artifact version: found {found}, expected {expected}")]
    IncompatibleVersion { found: String, expected: String },

    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { expected, got });
    }
    Ok(())
}
