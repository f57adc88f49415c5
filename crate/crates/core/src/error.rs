use thiserror::Error;

/// Errors raised anywhere in the estimation and testing pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("n = {0} is not a perfect square")]
    NotPerfectSquare(usize),

    #[error("coincident drivers for units {i} and {j} (distance {distance:e})")]
    CoincidentDrivers { i: usize, j: usize, distance: f64 },

    #[error("negative weight {value} at ({i}, {j})")]
    NegativeWeight { i: usize, j: usize, value: f64 },

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("degenerate fit: sigma_xi^2 = {0:e}")]
    DegenerateFit(f64),

    #[error("missing initial-period data: {0}")]
    MissingInitial(&'static str),

    #[error("parameters leave the stability region (lambda={lambda}, gamma={gamma}, rho={rho})")]
    Unstable { lambda: f64, gamma: f64, rho: f64 },

    #[error("optimizer failed to converge after {iterations} iterations (gradient norm {grad_norm:e})")]
    NoConvergence { iterations: usize, grad_norm: f64 },

    #[error("negative quadratic form {0:e} in test statistic")]
    NegativeStatistic(f64),

    #[error("problem too large for dense evaluation: nT = {0}")]
    TooLarge(usize),
}

impl Error {
    /// True for failures caused by the numbers rather than the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Singular(_)
                | Error::NotPositiveDefinite(_)
                | Error::DegenerateFit(_)
                | Error::Unstable { .. }
                | Error::NoConvergence { .. }
                | Error::NegativeStatistic(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
