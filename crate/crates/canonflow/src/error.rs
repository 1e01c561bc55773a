use thiserror::Error;

#[derive(Debug, Error)]
pub enum CanonError {
    #[error("dimension mismatch: {0}")]
    Shape(String),

    #[error("matrix not positive definite (pivot {pivot} at index {index})")]
    NotPositiveDefinite { pivot: f64, index: usize },

    #[error("family not admissible: min singular value of Pi is {min_sv:.3e} at grid point {point}")]
    NotAdmissible { min_sv: f64, point: usize },

    #[error("eigensolver did not converge: {0}")]
    EigenConvergence(String),

    #[error("flow terminated at iteration {iteration}: {reason}")]
    FlowTerminated { iteration: usize, reason: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("container format: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, CanonError>;
