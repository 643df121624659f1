use std::path::PathBuf;

use substrate::SubstrateError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty source sequence")]
    EmptySource,
    #[error("token {token} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("attention mask has {found} entries, expected {expected}")]
    MaskShape { expected: usize, found: usize },
    #[error("odd model dimension {0}: sinusoidal encoding needs an even size")]
    OddDimension(usize),
    #[error("dangling position node {0}")]
    DanglingNode(usize),
    #[error("parent node {parent} was created at step {parent_step}, not before step {step}")]
    ParentNotOlder { parent: usize, parent_step: usize, step: usize },
    #[error("ABS requires re-encoding; use recompute mode")]
    AbsIncremental,
    #[error("operation needs a model with the {0} head")]
    WrongHead(&'static str),
    #[error("non-finite loss for example {0}")]
    NonFiniteLoss(usize),
    #[error("instance {id} has {len} source tokens, above the batch budget {budget}")]
    OverBudget { id: usize, len: usize, budget: usize },
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error(transparent)]
    Substrate(#[from] SubstrateError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
