//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate vector: L2 norm {norm:.3e} below 1e-12")]
    DegenerateVector { norm: f64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("batch too small: need at least 2 clusters, got {0}")]
    InsufficientBatch(usize),

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("forward cache mismatch: {0}")]
    Cache(String),

    #[error("annealing schedule exhausted at iteration {0}")]
    ScheduleExhausted(usize),

    #[error("alignment error: {expected} triplets but {got} weights")]
    Alignment { expected: usize, got: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("stage mismatch: expected a {expected} checkpoint, found stage '{found}'")]
    Stage { expected: &'static str, found: String },

    #[error("malformed file: {0}")]
    Format(String),

    #[error("unsupported format version {found}, this build reads version {expected}")]
    Version { found: u32, expected: u32 },

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("lr schedule: step {step} past total_steps {total}")]
    StepRange { step: usize, total: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the CLI: 1 config, 2 runtime, 3 reserved for
    /// gradcheck failures (assigned by the gradcheck command itself).
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Stage { .. } | Error::Version { .. } => 1,
            _ => 2,
        }
    }
}
