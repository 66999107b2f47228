use dream_numerics::NumericsError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DreamError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("unknown caption token id {0}")]
    UnknownToken(u16),
    #[error("non-finite {component} loss at step {step}")]
    NonFiniteLoss { component: &'static str, step: u64 },
    #[error("non-finite latents at decoding step {0}")]
    NonFiniteLatent(usize),
    #[error("infeasible budget: {0}")]
    InfeasibleBudget(String),
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("file truncated while reading {0}")]
    Truncated(String),
    #[error("record `{name}` has shape {found:?}, model expects {expected:?}")]
    ShapeMismatch {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("missing record `{0}`")]
    Missing(String),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

pub type Result<T> = std::result::Result<T, DreamError>;
