//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A state index fell outside `[0, state_count)`.
    #[error("invalid state index {index} for state space of size {count}")]
    InvalidState { index: usize, count: usize },

    /// An episode was stepped past its horizon.
    #[error("episode finished: t={t} has reached horizon {horizon}")]
    EpisodeFinished { t: usize, horizon: usize },

    /// An agent's own cell carries zero occupancy mass, which cannot happen
    /// for a distribution built from a joint state containing that agent.
    #[error("impossible state: zero occupancy at cell {cell} occupied by the agent")]
    ImpossibleState { cell: usize },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("contract violation: {0}")]
    Contract(String),

    /// Population size does not fit in the configured encoding width.
    #[error("population {n} overflows a {bits}-bit encoding")]
    EncodingOverflow { n: u64, bits: u32 },

    #[error("population size must be positive, got {0}")]
    EncodingDomain(i64),

    #[error("config error: {0}")]
    Config(String),

    /// Analysis input carries no usable signal (e.g. constant activations).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("curve fit did not converge; best residual norm {residual}")]
    FitFailure { residual: f64 },

    /// Non-finite loss or gradients during training; message carries the dump.
    #[error("training fault: {0}")]
    TrainingFault(String),

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
