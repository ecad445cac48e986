use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Failure classes, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numeric,
    Io,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("line {line}: {reason}")]
    Schema { line: usize, reason: String },

    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("user {user}: expected t={expected}, got t={got}")]
    Sequencing { user: String, expected: u64, got: u64 },

    #[error("invalid state {state} (state count {count})")]
    InvalidState { state: usize, count: usize },

    #[error("degenerate particle cloud for user {user} at t={t}: {detail}")]
    DegenerateCloud { user: String, t: u64, detail: String },

    #[error("incomplete trace: missing snapshot for t={0}")]
    IncompleteTrace(u64),

    #[error("instance too large: {0}")]
    TooLarge(String),

    #[error("numerical error: {0}")]
    Numeric(String),

    #[error("ELBO decreased by {drop:e} at iteration {iteration}")]
    ElboDecrease { iteration: usize, drop: f64 },

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::TooLarge(_) => ErrorClass::Config,
            Error::Data(_)
            | Error::Schema { .. }
            | Error::Dimension { .. }
            | Error::Sequencing { .. }
            | Error::IncompleteTrace(_)
            | Error::CheckpointVersion { .. }
            | Error::CorruptCheckpoint(_) => ErrorClass::Data,
            Error::InvalidState { .. }
            | Error::DegenerateCloud { .. }
            | Error::Numeric(_)
            | Error::ElboDecrease { .. } => ErrorClass::Numeric,
            Error::Io(_) => ErrorClass::Io,
        }
    }
}
