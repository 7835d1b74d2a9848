use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("kernel cell average diverges: {0}")]
    DivergentKernel(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("KKT factorization failed: pivot {pivot:e} at column {column} after shift {shift:e}")]
    SingularKkt { column: usize, pivot: f64, shift: f64 },
    #[error("density is not positive at cell {cell} ({value:e})")]
    NonPositiveDensity { cell: usize, value: f64 },
    #[error("equality constraints are infeasible (residual {0:e})")]
    InfeasibleEqualities(f64),
    #[error("SQP step failed: {0}")]
    StepFailed(String),
    #[error("time step {step} failed: {source}")]
    RunAborted {
        step: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("unknown preset `{0}`")]
    UnknownPreset(String),
}
