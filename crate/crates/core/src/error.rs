use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: expected {expected} atoms, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("objects live on different sample spaces")]
    SpaceMismatch,

    #[error("invalid sample space: {0}")]
    InvalidSpace(String),

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("non-finite value at atom {index}")]
    NonFinite { index: usize },

    #[error("function is not mean-zero under the base distribution (mean = {mean:e})")]
    NotMeanZero { mean: f64 },

    #[error("base distribution does not have full support (atom {index} has zero mass)")]
    NotFullSupport { index: usize },

    #[error("t = {t} is outside the submodel range (-{limit}, {limit})")]
    OutOfRange { t: f64, limit: f64 },

    #[error("t must be nonzero")]
    ZeroStep,

    #[error("grid needs at least {needed} points, got {got}")]
    GridTooSmall { needed: usize, got: usize },

    #[error("grid must be strictly decreasing positive values")]
    BadGrid,

    #[error("path loses support at t = {t} (atom {index})")]
    SupportLost { t: f64, index: usize },

    #[error("functional '{name}' failed: {reason}")]
    FunctionalFailed { name: String, reason: String },

    #[error("finite differences disagree across step sizes (spread {spread:e} > {tolerance:e})")]
    NotDifferentiable { spread: f64, tolerance: f64 },

    #[error("basis is rank deficient")]
    RankDeficient,

    #[error("nuisance direction is inadmissible: {0}")]
    InadmissibleDirection(String),

    #[error("nuisance value is inadmissible: {0}")]
    InadmissibleNuisance(String),

    #[error("degenerate Jacobian G = {0:e}")]
    DegenerateJacobian(f64),

    #[error("estimating function is not correctly specified: {0}")]
    Misspecified(String),

    #[error("local product structure violated: {0}")]
    ProductStructure(String),

    #[error("regularity condition {condition} violated: {detail}")]
    Regularity {
        condition: &'static str,
        detail: String,
    },

    #[error("efficient influence function has zero variance")]
    ZeroVariance,

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("{0}")]
    Invalid(String),
}
