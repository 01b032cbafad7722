use thiserror::Error;

/// Errors raised by the solver and the verification routines.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: expected {expected}, got {got}")]
    Dimension {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("matrix is not symmetric within tolerance (asymmetry {asymmetry:.3e})")]
    Asymmetric { asymmetry: f64 },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("closed loop is not stable (spectral radius {rho:.12})")]
    Unstable { rho: f64 },

    #[error("{what} did not converge after {iters} iterations (residual {residual:.3e})")]
    Convergence {
        what: &'static str,
        iters: usize,
        residual: f64,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid problem: {0}")]
    Validation(String),

    #[error("policy gradient step {step} left the stabilizing set (spectral radius {rho:.6}); reduce the stepsize")]
    Stepsize { step: usize, rho: f64 },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("no feasible multiplier on the grid: {0}")]
    Infeasible(String),

    #[error("reference optimum {d_star} is below a recorded dual value {recorded}")]
    InconsistentReference { d_star: f64, recorded: f64 },

    #[error("stepsize condition violated: eta = {eta} exceeds 2/mu = {limit}")]
    StepsizeCondition { eta: f64, limit: f64 },
}

pub type Result<T> = std::result::Result<T, Error>;
