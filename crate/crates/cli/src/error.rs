use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] condense::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: invalid configuration: {message}")]
    ConfigFile { path: PathBuf, message: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{path}: {message}")]
    Artifact { path: PathBuf, message: String },
}

impl CliError {
    pub fn io(path: &Path, source: io::Error) -> Self {
        CliError::Io { path: path.to_path_buf(), source }
    }

    /// Wraps a core error raised while reading or writing `path`.
    pub fn at(path: &Path, e: condense::Error) -> Self {
        match e {
            condense::Error::Io(source) => CliError::Io { path: path.to_path_buf(), source },
            other => CliError::Artifact { path: path.to_path_buf(), message: other.to_string() },
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.kind(),
            CliError::Io { .. } => "io",
            CliError::ConfigFile { .. } | CliError::Config(_) => "config",
            CliError::Artifact { .. } => "artifact",
        }
    }
}
