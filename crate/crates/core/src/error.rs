use thiserror::Error;

/// Errors raised by sampling, decomposition and estimation routines.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument `{name}`: {reason}")]
    InvalidArgument { name: &'static str, reason: String },

    #[error("non-finite value produced by {context}")]
    NonFiniteValue { context: String },

    #[error("quantile function `{label}` is not monotone near u = {at}")]
    NonMonotoneQuantile { label: String, at: f64 },

    #[error(
        "decomposition residual {residual:.3e} at ({row}, {col}) exceeds 10x its standard error {std_error:.3e}; refine the bin grid"
    )]
    DegenerateDecomposition {
        row: usize,
        col: usize,
        residual: f64,
        std_error: f64,
    },

    #[error("singular Jacobian (condition estimate {condition:.3e})")]
    SingularJacobian { condition: f64 },

    #[error("matrix is not positive semi-definite: smallest eigenvalue {min_eigenvalue:.3e} below -{tolerance:.3e}")]
    NonPsdInput { min_eigenvalue: f64, tolerance: f64 },

    #[error("linear predictor {eta} leaves the domain of the `{family}` link")]
    LinkDomainViolation { family: String, eta: f64 },

    #[error("argument {value} outside the domain {domain}")]
    DomainError { value: f64, domain: &'static str },

    #[error("{failures} of {total} fits failed for {method} n={n}, above the 20% abort threshold")]
    TooManyFailures {
        method: String,
        n: usize,
        failures: usize,
        total: usize,
    },

    #[error("malformed input: {0}")]
    Parse(String),
}

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            name,
            reason: reason.into(),
        }
    }

    /// True for failures of the numerics rather than of the caller's input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFiniteValue { .. }
                | Error::DegenerateDecomposition { .. }
                | Error::SingularJacobian { .. }
                | Error::NonPsdInput { .. }
                | Error::LinkDomainViolation { .. }
                | Error::TooManyFailures { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
