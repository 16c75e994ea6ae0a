use thiserror::Error;

/// Errors produced by dataset construction, projection, and the component solvers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("column `{0}` has zero variance under the observation weights")]
    ConstantColumn(String),

    /// A projection or inversion basis is rank deficient. Carries the relative
    /// size of the offending singular value. Callers must drop or
    /// re-orthogonalize columns; nothing falls back to a pseudo-inverse.
    #[error("basis is rank deficient (relative singular value {0:.3e})")]
    SingularBasis(f64),

    #[error("matrix is not symmetric (max asymmetry {0:.3e})")]
    NotSymmetric(f64),

    #[error("matrix is not positive definite")]
    NotPositiveDefinite,

    #[error("dependent data carries no covariance with the predictor group")]
    NullCovariance,

    #[error("component of group `{group}` at rank {rank} degenerated into the conditioning span")]
    DegenerateComponent { group: String, rank: usize },

    #[error("not enough observations ({n}) for {regressors} regressors")]
    InsufficientDof { n: usize, regressors: usize },

    #[error("observation weight {index} is {value}; weights must be positive and finite")]
    NonPositiveWeight { index: usize, value: f64 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid column blocks: {0}")]
    InvalidBlocks(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),
}

pub type Result<T> = std::result::Result<T, Error>;
