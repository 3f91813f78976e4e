use thiserror::Error;

/// Errors raised across the estimation stack.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("matrix is not symmetric positive definite{0}")]
    NotSpd(String),

    #[error("matrix is not symmetric within tolerance")]
    NotSymmetric,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite matrix entry")]
    NonFinite,

    #[error("point is not on the domain: {0}")]
    DomainViolation(String),

    #[error("tangent basis is degenerate: found {found} of {expected} directions")]
    DegenerateBasis { found: usize, expected: usize },

    #[error("retraction left the domain")]
    RetractionFailure,

    #[error("invalid shape parameter: {0}")]
    InvalidShape(String),

    #[error("vector fields live on different domains")]
    DomainMismatch,

    #[error("field provides no jacobian and no divergence")]
    MissingJacobian,

    #[error("estimating system is numerically singular (condition {0:.3e})")]
    SingularSystem(f64),

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("newton iteration did not converge after {0} iterations")]
    NoConvergence(usize),

    #[error("model has no closed-form fisher score")]
    MissingFisherScore,

    #[error("rejection ratio exceeded one (log ratio {0:.3e} above bound)")]
    BoundViolation(f64),

    #[error("sampler unsupported: {0}")]
    SamplerUnsupported(String),

    #[error("rejection sampler exhausted its attempt budget")]
    SamplerExhausted,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}
