use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("objective is unbounded below on the given interval")]
    UnboundedObjective,

    #[error("subproblem has no feasible point: {0}")]
    InfeasibleSubproblem(String),

    #[error("index {index} out of range (0..{len})")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("operation not supported for fairness kind {0}")]
    UnsupportedFairness(&'static str),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("instance is outside the identifiable class: {0}")]
    NotInClass(String),

    #[error("non-finite subgradient at iteration {0}")]
    NonFiniteSubgradient(usize),

    #[error("sign-pattern enumeration refused for L = {0} (limit 12)")]
    PatternLimit(usize),

    #[error("grid of {0} points exceeds the 1e8 limit")]
    GridTooLarge(u128),

    #[error("environment exhausted: {0}")]
    EnvironmentExhausted(String),

    #[error("load error at row {row}, column '{column}': {message}")]
    Load {
        row: usize,
        column: String,
        message: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
