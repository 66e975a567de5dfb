use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("invalid parameter: {0}")]
    Validation(String),

    /// A density or ratio is undefined at the requested point.
    #[error("domain error: {0}")]
    Domain(String),

    /// The contaminated prior vanishes where the other density has mass.
    #[error("prior positivity violated (mixture density is zero at {point:?})")]
    PriorPositivity { point: Vec<f64> },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("KL Hessian is not positive definite (min eigenvalue {min_eigenvalue:e})")]
    IllConditioned { min_eigenvalue: f64 },

    #[error("estimate unreliable: effective sample size {ess:.2} below threshold {threshold}")]
    Unreliable { ess: f64, threshold: f64 },

    /// An expectation that should be finite diverged; carries what was accumulated.
    #[error("divergent estimate: {detail} (partial value {partial})")]
    Divergent { detail: String, partial: f64 },

    #[error("quadrature accuracy not reached: {0}")]
    Accuracy(String),

    #[error("finite-difference precision: {0}")]
    Precision(String),

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("sampler failure: {0}")]
    Sampler(String),
}
