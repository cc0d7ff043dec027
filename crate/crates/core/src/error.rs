//! Error type shared by every module of the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("syntax error at byte {offset}: {message}")]
    Syntax { offset: usize, message: String },

    #[error("unknown function `{name}` at byte {offset}")]
    UnknownFunction { name: String, offset: usize },

    #[error("unknown variable `{0}`")]
    UnknownVariable(String),

    #[error("no binding for variable `{0}`")]
    MissingBinding(String),

    #[error("domain error in `{node}`: {message}")]
    Domain { node: String, message: String },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("problem file: {0}")]
    Format(String),

    #[error(
        "time variable `t` appears in {0}; suspend the problem by adding a state with drift 1 \
         and zero diffusion, then use that state instead of t"
    )]
    AutonomyViolation(String),

    #[error("unknown builtin `{name}`; available: {available}")]
    UnknownBuiltin { name: String, available: String },

    #[error("initial condition is inconsistent: |g(x0,u0)| = {residual:e} exceeds {tolerance:e}")]
    InconsistentInit { residual: f64, tolerance: f64 },

    #[error("singular reduction: |det| = {det:e} below guard {guard:e}")]
    SingularReduction { det: f64, guard: f64 },

    #[error("singular Jacobian in Newton iteration (det = {0:e})")]
    SingularJacobian(f64),

    #[error("Newton iteration did not converge after {iterations} iterations (residual {residual:e})")]
    NewtonDivergence { iterations: usize, residual: f64 },

    #[error("Picard iteration did not converge after {iterations} iterations (last change {last_delta:e})")]
    NonConvergence { iterations: usize, last_delta: f64 },

    #[error("method precondition failed: {0}")]
    Precondition(String),

    #[error("not applicable: {0}")]
    Inapplicable(String),

    #[error("characteristic function rejected: {0}")]
    SpecInvalid(String),

    #[error("empty ensemble")]
    EmptyEnsemble,

    #[error("i/o: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl Error {
    /// Whether the error describes a malformed problem rather than a failed method.
    pub fn is_problem_error(&self) -> bool {
        matches!(
            self,
            Error::Syntax { .. }
                | Error::UnknownFunction { .. }
                | Error::UnknownVariable(_)
                | Error::DimensionMismatch(_)
                | Error::Format(_)
                | Error::AutonomyViolation(_)
                | Error::UnknownBuiltin { .. }
        )
    }

    /// Whether the error is a failed precondition of the requested method.
    pub fn is_precondition_error(&self) -> bool {
        matches!(
            self,
            Error::Precondition(_)
                | Error::Inapplicable(_)
                | Error::InconsistentInit { .. }
                | Error::SpecInvalid(_)
                | Error::SingularReduction { .. }
        )
    }
}
