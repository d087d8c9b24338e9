use thiserror::Error;

/// Errors raised anywhere in the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid character {ch:?} at position {position}")]
    InvalidCharacter { ch: char, position: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("alignment row {row} has length {found}, expected {expected}")]
    AlignmentLength {
        row: usize,
        expected: usize,
        found: usize,
    },

    #[error("mutation {mutant:?}: {message}")]
    Mutation { mutant: String, message: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("shape mismatch for {name}: expected {expected:?}, found {found:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("sequence of {len} tokens exceeds max_positions {max}")]
    Overlength { len: usize, max: usize },

    #[error("unsupported checkpoint format version {0}")]
    Version(u32),

    #[error("checkpoint checksum mismatch")]
    Checksum,

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("no supervised positions in batch")]
    EmptySupervision,

    #[error("optimizer step after {seen} of {required} micro-batches")]
    IncompleteAccumulation { seen: usize, required: usize },

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("mask plan does not fit sequence: {0}")]
    PlanMismatch(String),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("statistic undefined: {0}")]
    Undefined(&'static str),

    #[error("confidence function needs a classifier head")]
    MissingHead,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
