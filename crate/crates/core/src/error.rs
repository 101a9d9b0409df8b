use thiserror::Error;

/// Errors produced by the solver kit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("every dof is constrained, nothing to solve")]
    EmptySystem,

    #[error("singular system: {0}")]
    SingularSystem(String),

    #[error("ill-posed input: {0}")]
    IllPosed(String),

    #[error("infeasible sampling spec: {0}")]
    InfeasibleSampling(String),

    #[error("local solution vanished, triplet is degenerate")]
    DegenerateTriplet,

    #[error("direction is linearly dependent on the current basis")]
    DependentDirection,

    #[error("convergence failure: {0}")]
    ConvergenceFailure(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("state integrity: {0}")]
    Integrity(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
