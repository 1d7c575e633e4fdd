use thiserror::Error;

/// Errors surfaced by the shape-modeling and LDS layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate shape: {0}")]
    DegenerateShape(String),

    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    #[error("point outside domain bounding box: ({0}, {1}, {2})")]
    OutOfBounds(f64, f64, f64),

    #[error("surface projection failed after {steps} steps (|sdf| = {residual})")]
    ProjectionFailure { steps: usize, residual: f64 },

    #[error("invalid synthetic cohort spec: {0}")]
    InvalidSpec(String),

    #[error("degenerate particle configuration: {0}")]
    DegenerateConfiguration(String),

    #[error("objective became non-finite at iteration {iteration}: {detail}")]
    NonFiniteObjective { iteration: usize, detail: String },

    #[error("innovation covariance singular at t = {0}")]
    SingularInnovation(usize),

    #[error("predicted covariance singular at t = {0}")]
    SingularPrediction(usize),

    #[error("rank-deficient sufficient statistics at t = {0}")]
    RankDeficientStatistics(usize),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid mask fraction: {0}")]
    InvalidFraction(f64),

    #[error("degenerate ensemble: {0}")]
    DegenerateEnsemble(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;
