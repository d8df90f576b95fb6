use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("{0} is not symmetric positive-definite")]
    NotPositiveDefinite(&'static str),

    #[error("index {index} out of range (limit {limit})")]
    IndexOutOfRange { index: usize, limit: usize },

    #[error("rollout diverged at stage {0}")]
    DivergedRollout(usize),

    #[error("solver failure: {0}")]
    SolverFailure(String),

    #[error("innovation covariance factorization failed")]
    InnovationFactorization,

    /// `P^-1 - mu * V_xx` lost definiteness: mu is beyond the well-posedness limit.
    #[error("risk limit exceeded: min eigenvalue of P^-1 - mu V_xx is {min_eigenvalue:e} (margin {margin:e}, mu {mu:e})")]
    RiskLimitExceeded {
        mu: f64,
        min_eigenvalue: f64,
        margin: f64,
    },

    #[error("objective is not strictly concave (max eigenvalue {0:e})")]
    IllPosed(f64),

    #[error("invalid {field}: {reason}")]
    Validation { field: String, reason: String },

    #[error("config parse error: {0}")]
    Parse(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn validation(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
