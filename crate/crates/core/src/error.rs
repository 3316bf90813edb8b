use thiserror::Error;

use f2r_autograd::checkpoint::CheckpointError;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("vocabulary error: {0}")]
    Vocab(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("sequence of length {len} exceeds positional capacity {max}")]
    TooLong { len: usize, max: usize },
    #[error("input sequence is empty")]
    EmptySequence,
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("training diverged at step {step}: non-finite loss")]
    Diverged { step: usize },
    #[error("the FEED2RESP setting needs a trained converter")]
    MissingConverter,
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
