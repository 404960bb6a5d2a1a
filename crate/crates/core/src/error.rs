use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("value outside domain: {0}")]
    Domain(String),

    #[error("batch too small: {0}")]
    BatchSize(String),

    #[error("invalid batch composition: {0}")]
    BatchComposition(String),

    #[error("label out of range: {0}")]
    Label(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("need at least 2 identities to estimate domain statistics, got {0}")]
    InsufficientIdentities(usize),

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("unsupported format version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("stale upload from client {client}: stamped epoch {stamp}, server at {current}")]
    Stale { client: u32, stamp: u32, current: u32 },

    #[error("stale forward cache: {0}")]
    StaleCache(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("sampling infeasible: {0}")]
    Sampling(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn parse(offset: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            offset,
            message: message.into(),
        }
    }
}
