use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("contract violation: {0}")]
    ContractViolation(String),

    #[error("unknown relation `{0}`")]
    UnknownRelation(String),

    #[error("no scorer entry for context {context:?} and prefix {prefix:?}")]
    MissingEntry { context: String, prefix: Vec<u32> },

    /// A scorer call failed while decoding; `step` is the output position.
    #[error("scorer failed at step {step}: {source}")]
    Backend {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),

    #[error("protocol error: {message} (body: {excerpt:?})")]
    Protocol { message: String, excerpt: String },

    #[error("line {line}: {message}")]
    Schema { line: usize, message: String },

    #[error("agreement undefined: {0}")]
    UndefinedAgreement(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// True for failures of a scoring backend (as opposed to bad data).
    pub fn is_backend(&self) -> bool {
        match self {
            Error::Backend { .. }
            | Error::BackendUnavailable(_)
            | Error::Protocol { .. }
            | Error::MissingEntry { .. } => true,
            _ => false,
        }
    }
}
