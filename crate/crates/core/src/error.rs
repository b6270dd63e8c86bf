use std::fmt;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("unsupported velocity field: {0} (operation requires an MLP field)")]
    UnsupportedField(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(
        "no elites survive: floor({fraction} * {candidates}) = 0; increase the elite fraction or the candidate count"
    )]
    NoElites { fraction: f64, candidates: usize },

    #[error("search aborted at iteration {iteration}: all {candidates} candidate rewards were non-finite")]
    AllRewardsNonFinite { iteration: usize, candidates: usize },

    #[error("degenerate step density: sigma_t is 0 but the noise is nonzero")]
    DegenerateDensity,

    #[error("behavior log-probability missing for trajectory {trajectory}, step {step}")]
    MissingBehaviorLogProb { trajectory: usize, step: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("unknown reward '{name}'; available: {}", .available.join(", "))]
    UnknownReward { name: String, available: Vec<&'static str> },

    #[error("{0}")]
    Diverged(Divergence),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Diagnostic for the training divergence guard.
#[derive(Debug, Clone, PartialEq)]
pub struct Divergence {
    pub epoch: usize,
    pub initial_reward: f64,
    pub current_reward: f64,
    pub margin: f64,
    pub consecutive: usize,
}

impl fmt::Display for Divergence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "training diverged at epoch {}: mean reward {} stayed below initial {} - margin {} for {} consecutive epochs",
            self.epoch, self.current_reward, self.initial_reward, self.margin, self.consecutive
        )
    }
}

pub(crate) fn check_dims(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { expected, got });
    }
    Ok(())
}
