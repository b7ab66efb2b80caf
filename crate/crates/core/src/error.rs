use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("horizon must be positive: t = {t}, T = {horizon}")]
    NonpositiveHorizon { t: f64, horizon: f64 },
    #[error("grid needs at least one step")]
    ZeroSteps,
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("measures have different support sizes ({0} vs {1})")]
    UnequalSupportSize(usize, usize),
    #[error("dimension mismatch ({0} vs {1})")]
    DimMismatch(usize, usize),
    #[error("metric weights must be positive")]
    NonpositiveWeight,
    #[error("finite-difference step too small: non-finite result")]
    StepTooSmall,
    #[error("non-finite state at node {node}")]
    NonfiniteState { node: usize },
    #[error("missing coefficient derivative: {0}")]
    MissingDerivative(&'static str),
    #[error("theta node {theta} is off the grid (nodes 0..={last})")]
    ThetaOffGrid { theta: usize, last: usize },
    #[error("Picard iteration diverged after {iterations} iterations")]
    PicardDivergence { iterations: usize },
    #[error("regression is singular: {0}")]
    RegressionSingular(String),
    #[error("second-order backward derivatives require g affine in z")]
    NonAffineG,
    #[error("linear BDSDE coefficients violate the z-sensitivity budget: {0}")]
    LinearBudget(String),
    #[error("unsupported coefficient structure: {0}")]
    Unsupported(String),
    #[error("missing derivative field: {0}")]
    MissingDerivativeField(&'static str),
    #[error("ladder needs at least {needed} points, got {got}")]
    InsufficientLadder { needed: usize, got: usize },
    #[error("report schemas differ: {0}")]
    SchemaMismatch(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
