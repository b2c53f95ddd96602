use std::path::PathBuf;

use crate::config::ConfigErrors;
use crate::types::TokenId;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration:\n{0}")]
    Config(#[from] ConfigErrors),

    #[error("invalid {what}: {reason}")]
    Invalid { what: &'static str, reason: String },

    #[error("context of length {len} exceeds the context window of {window}")]
    ContextTooLong { len: usize, window: usize },

    #[error("token id {token} is outside the vocabulary (size {vocab})")]
    TokenOutOfRange { token: TokenId, vocab: usize },

    #[error("a candidate pool needs at least 2 candidates, got {0}")]
    PoolTooSmall(usize),

    #[error("pool for prompt `{0}` has unscored candidates")]
    UnscoredPool(String),

    #[error("degenerate pool for prompt `{prompt_id}`: {reason}")]
    DegeneratePool { prompt_id: String, reason: String },

    #[error("candidate index {index} out of range for pool of {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("NaN passed to {0}")]
    NaN(&'static str),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error(transparent)]
    Scores(#[from] crate::scoring::ScoreFileError),

    #[error("empty batch")]
    EmptyBatch,

    #[error("step {step} out of range for {total} total steps")]
    StepOutOfRange { step: usize, total: usize },

    #[error("dataset fingerprint {found} does not match the configured fingerprint {expected}")]
    FingerprintMismatch { expected: String, found: String },

    #[error("loss became non-finite at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("{source_name}:{line}: {message}")]
    Parse {
        source_name: String,
        line: usize,
        message: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("experiment: {0}")]
    Experiment(String),

    #[error("degenerate world: {0}")]
    DegenerateWorld(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Process exit code for this error: 1 input or validation, 2
    /// degenerate data, 3 fingerprint mismatch, 4 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::DegeneratePool { .. } | Error::DegenerateWorld(_) => 2,
            Error::FingerprintMismatch { .. } => 3,
            Error::NonFiniteLoss { .. } | Error::NaN(_) | Error::NonFinite(_) => 4,
            _ => 1,
        }
    }

    pub(crate) fn invalid(what: &'static str, reason: impl Into<String>) -> Self {
        Error::Invalid {
            what,
            reason: reason.into(),
        }
    }

    pub(crate) fn parse(source_name: &str, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            source_name: source_name.to_string(),
            line,
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
