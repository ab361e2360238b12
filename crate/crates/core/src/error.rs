use thiserror::Error;

/// Errors raised by the numerical pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("invalid grid: {0}")]
    Grid(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("iteration limit of {iterations} reached (last update {last_update:e})")]
    IterationLimit { iterations: usize, last_update: f64 },
    #[error("iteration diverged: {0}")]
    Divergence(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("simulation unstable at t = {t}: {reason}")]
    Instability { t: f64, reason: String },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("decay fit failed: {0}")]
    Fit(String),
    #[error("no sign change found for the boundary equation on [{lo:e}, {hi:e}]")]
    NoBracket { lo: f64, hi: f64 },
    #[error("bisection stopped with boundary residual {residual:e} above tolerance {tol:e}")]
    Tolerance { residual: f64, tol: f64 },
    #[error("sigma sweep did not converge: {0}")]
    Convergence(String),
}

pub type Result<T> = std::result::Result<T, Error>;
