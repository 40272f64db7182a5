use thiserror::Error;

/// Errors raised anywhere in the library.
///
/// Variants are grouped by the stage that produces them. [`Error::class`]
/// folds them into the coarse categories the command line maps to exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("time stamps must be strictly increasing (violated at index {index})")]
    NonIncreasingTimes { index: usize },

    #[error("hyperparameter optimization failed: {0}")]
    OptimizationFailed(String),

    #[error("derivative covariance could not be conditioned (chi_d reached {chi_d:.3e}, condition estimate {condition:.3e})")]
    ConditioningFailed { chi_d: f64, condition: f64 },

    #[error("matrix is not positive definite even after jitter {jitter:.3e}")]
    NotPositiveDefinite { jitter: f64 },

    #[error("dictionary term `{term}` is not finite at row {row}")]
    NonFiniteTerm { term: String, row: usize },

    #[error("normal equations are singular; add regularization or data")]
    SingularSystem,

    #[error("sequential thresholding pruned every term (threshold {threshold})")]
    AllTermsPruned { threshold: f64 },

    #[error("parameter index map mismatch: {0}")]
    IndexMapMismatch(String),

    #[error("ground-truth parameter norm is zero")]
    ZeroTruthNorm,

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },

    #[error("initial point has non-finite log density")]
    NonFiniteInit,

    #[error("Newton iteration diverged at step {step} (t = {time}, state = {state:?})")]
    NewtonDivergence {
        step: usize,
        time: f64,
        state: Vec<f64>,
    },

    #[error("adaptive step size underflow at t = {time}")]
    StepSizeUnderflow { time: f64 },

    #[error("every ensemble draw diverged ({draws} draws)")]
    AllDrawsDiverged { draws: usize },

    #[error("domain violation: {0}")]
    DomainViolation(String),

    #[error(
        "training set is empty (window holds {available} points, requested fraction {fraction})"
    )]
    EmptyTrainingSet { available: usize, fraction: f64 },

    #[error("degenerate time grid (non-positive spacing at index {index})")]
    DegenerateGrid { index: usize },

    #[error("Savitzky-Golay window {window} invalid for {len} samples and order {order}")]
    WindowTooLarge {
        window: usize,
        order: usize,
        len: usize,
    },

    #[error("grid is not uniform (spacing deviates at index {index})")]
    NonUniformGrid { index: usize },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("malformed data file: {0}")]
    Format(String),
}

/// Coarse error category.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Numerical,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        use Error::*;
        match self {
            InvalidArgument(_) | ShapeMismatch { .. } | IndexMapMismatch(_) => ErrorClass::Usage,
            NonIncreasingTimes { .. }
            | EmptyTrainingSet { .. }
            | DegenerateGrid { .. }
            | WindowTooLarge { .. }
            | NonUniformGrid { .. }
            | NonFiniteTerm { .. }
            | ZeroTruthNorm
            | Io(_)
            | Json(_)
            | Format(_) => ErrorClass::Data,
            OptimizationFailed(_)
            | ConditioningFailed { .. }
            | NotPositiveDefinite { .. }
            | SingularSystem
            | AllTermsPruned { .. }
            | NonFiniteInit
            | NewtonDivergence { .. }
            | StepSizeUnderflow { .. }
            | AllDrawsDiverged { .. }
            | DomainViolation(_) => ErrorClass::Numerical,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
