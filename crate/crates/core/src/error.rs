use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("degenerate update: {0}")]
    DegenerateUpdate(String),

    #[error("cluster of {size} members exceeds the exhaustive bipartition limit of {limit}")]
    SizeLimit { size: usize, limit: usize },

    #[error("client {0} is unreachable (zero data rate)")]
    UnreachableClient(usize),

    #[error("zero data rate: upload can never complete")]
    ZeroRate,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
