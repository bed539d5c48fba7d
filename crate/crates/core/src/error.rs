use thiserror::Error;

/// Errors raised by the simulation library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("trajectory {trajectory} diverged at t = {time}")]
    Divergence { trajectory: usize, time: f64 },

    #[error("trajectory {trajectory} has zero norm and cannot be renormalised")]
    ZeroNorm { trajectory: usize },

    #[error("numerically degenerate quantity: {0}")]
    Degenerate(String),

    #[error("rejection sampler acceptance rate {rate:.2e} fell below threshold")]
    SamplerDegeneracy { rate: f64 },

    #[error("conditioning underflow: Tr(K rho K^dagger) = {0:e}")]
    ConditioningUnderflow(f64),

    #[error("particle filter collapsed in conditional trajectory {trajectory}")]
    FilterCollapse { trajectory: usize },

    #[error("dimension {requested} exceeds dense-matrix limit {limit}")]
    Capability { requested: usize, limit: usize },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn arg<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Argument(msg.into()))
}
