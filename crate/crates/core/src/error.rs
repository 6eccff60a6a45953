use thiserror::Error;

/// Failure modes shared by every solver in the crate.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("numeric failure: {0}")]
    NumericFailure(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("perturbation envelope violated: {0}")]
    EnvelopeViolation(String),
    #[error("degenerate eigenvalue at mode {mode} (gap {gap:e})")]
    DegenerateEigenvalue { mode: usize, gap: f64 },
    #[error("resonance singularity: omega^2 = {omega2}, c^2 lambda = {w2}")]
    ResonanceSingularity { omega2: f64, w2: f64 },
    #[error("contraction violated at iterate {iterate}: ratio {ratio}")]
    ContractionViolation { iterate: usize, ratio: f64 },
    #[error("assumption violated: {0}")]
    AssumptionViolation(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
