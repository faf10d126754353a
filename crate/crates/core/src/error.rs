use thiserror::Error;

/// Errors raised by the solver library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TeamsError {
    #[error("malformed problem: {0}")]
    MalformedProblem(String),
    #[error("observation noise scale of DM {dm} is not positive definite")]
    SingularNoise { dm: usize },
    #[error("state gain at stage {stage} is not invertible")]
    SingularGain { stage: usize },
    #[error("information stencil of DM {dm} reads time {requested} beyond current time {now}")]
    FutureAccess { dm: usize, requested: f64, now: f64 },
    #[error("stencil incompatible with time grid: {0}")]
    IncompatibleStencil(String),
    #[error("ensemble carries no stored noise increments")]
    MissingIncrements,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("wrong measure: {0}")]
    WrongMeasure(String),
    #[error("payoff evaluated to NaN")]
    NaNPayoff,
    #[error("adjoint exceeded 1e6 in magnitude at node {node}")]
    ExplodingAdjoint { node: usize },
    #[error("brute-force search budget exceeded after {evaluated} evaluations")]
    BudgetExceeded { evaluated: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for TeamsError {
    fn from(e: std::io::Error) -> Self {
        TeamsError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, TeamsError>;
