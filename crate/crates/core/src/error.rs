use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("numeric fault: {0}")]
    NumericFault(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("data stream exhausted")]
    EndOfStream,

    #[error("internal invariant violated: {0}")]
    Invariant(String),

    #[error(
        "switch configuration error: {numerator} is not divisible by {divisor} \
         (nearest buffer sizes: {floor} or {ceil})"
    )]
    Switch {
        numerator: u64,
        divisor: u64,
        floor: u64,
        ceil: u64,
    },

    #[error("step size {eta} violates the admissible range [{lower}, {upper}]")]
    CapViolation { eta: f64, lower: f64, upper: f64 },

    #[error("deadlock: no pending events and blocked workers {blocked:?}")]
    Deadlock { blocked: Vec<String> },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("logging not enabled: {0}")]
    LoggingNotEnabled(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
