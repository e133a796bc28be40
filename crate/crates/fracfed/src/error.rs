use thiserror::Error;

/// Errors surfaced by the simulator.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },

    #[error("tap index {index} out of range (network has {count} taps)")]
    TapOutOfRange { index: usize, count: usize },

    #[error("numerical error: {context}")]
    NonFinite { context: String },

    #[error("degenerate trigger: {0}")]
    DegenerateTrigger(String),

    #[error("degenerate denominator in SCC (static SRS = {0})")]
    DegenerateDenominator(f64),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("krum needs at least f + 3 = {needed} updates, got {got}")]
    KrumTooFewUpdates { needed: usize, got: usize },

    #[error("client {client} diverged at round {round}: {detail}")]
    Diverged { client: usize, round: usize, detail: String },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
