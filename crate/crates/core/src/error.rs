use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("numerical failure: {0}")]
    Numeric(String),

    #[error("invalid input: {0}")]
    Validation(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("synthesis failed: {0}")]
    Synthesis(String),

    /// `Im Q ⊄ Im R`: no parameter-feedback map zeros the gradient.
    #[error(
        "infeasible: parameter direction {column} leaves the image of R \
         (residual {residual:.3e}, violating direction {direction:?})"
    )]
    Infeasible {
        column: usize,
        residual: f64,
        direction: Vec<f64>,
    },

    #[error("singular Jacobian at iteration {iteration} (condition number {condition:.3e})")]
    Singular { iteration: usize, condition: f64 },

    #[error("no convergence after {iterations} iterations (residual {residual:.3e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("step size underflow at t = {time} (h = {step:.3e})")]
    Stiffness { time: f64, step: f64 },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

pub(crate) fn dim_err(msg: impl Into<String>) -> Error {
    Error::Dimension(msg.into())
}
