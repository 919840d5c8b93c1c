use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("loss became non-finite at step {step}")]
    NonFiniteLoss { step: u64 },
    #[error("velocity field produced non-finite output at tau={tau}")]
    NonFiniteVelocity { tau: f64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint content hash mismatch: header {stored:016x}, computed {computed:016x}")]
    HashMismatch { stored: u64, computed: u64 },
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("expert failure rate {rate:.3} exceeds 0.5; environment misconfigured")]
    ExpertFailure { rate: f64 },
    #[error("step called on a finished episode")]
    EpisodeDone,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}
