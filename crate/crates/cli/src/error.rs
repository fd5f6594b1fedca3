use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Rejected input: unreadable, malformed or invalid configuration.
    #[error("{0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] cfl_core::Error),

    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("cell {cell}: {source}")]
    Cell { cell: String, source: Box<CliError> },

    #[error("thread pool: {0}")]
    Pool(#[from] rayon::ThreadPoolBuildError),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.display().to_string(), source }
    }

    /// 2 for configuration problems, 1 for everything that fails later.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Core(cfl_core::Error::Config(_)) => 2,
            CliError::Cell { source, .. } => source.exit_code(),
            _ => 1,
        }
    }
}
