use thiserror::Error;

use crate::smdp::TerminationReason;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] h2o2_autodiff::Error),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("action id {0} out of range 0..5")]
    InvalidAction(u8),
    #[error("episode has already terminated")]
    Terminal,
    #[error("trajectory is empty")]
    EmptyTrajectory,
    #[error("trajectory marks done before its final step (index {0})")]
    EarlyDone(usize),
    #[error("replay buffer is empty")]
    EmptyBuffer,
    #[error("need at least two goal embeddings, got {0}")]
    TooFewEmbeddings(usize),
    #[error("goal embedding {0} has zero norm")]
    ZeroNorm(usize),
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("length mismatch in {what}: expected {expected}, got {got}")]
    Length {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("non-finite loss component `{0}`")]
    NonFiniteLoss(String),
    #[error("step {0} has no behavior log-probability")]
    MissingBehaviorLogProb(usize),
    #[error("goal component {value} in dimension {dim} is not a bin center")]
    OffGrid { dim: usize, value: f64 },
    #[error("metrics record at {frames} frames follows one at {previous}")]
    OutOfOrder { previous: u64, frames: u64 },
    #[error("unexpected termination reason {0:?}")]
    Reason(TerminationReason),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
