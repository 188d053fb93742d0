use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("optimizer state error: {0}")]
    State(String),
    #[error("calibration error: {0}")]
    Calibration(String),
    #[error("unsupported topology: {0}")]
    UnsupportedTopology(String),
    #[error("pruning plan error: {0}")]
    Plan(String),
    #[error("structural error: {0}")]
    Structural(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("checkpoint corrupted: {0}")]
    Corruption(String),
    #[error("unsupported checkpoint version {found} (this build reads up to {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// Short machine-readable tag for the error class.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Config(_) => "config",
            Error::Domain(_) => "domain",
            Error::State(_) => "state",
            Error::Calibration(_) => "calibration",
            Error::UnsupportedTopology(_) => "unsupported_topology",
            Error::Plan(_) => "plan",
            Error::Structural(_) => "structural",
            Error::NonFinite(_) => "non_finite",
            Error::Format(_) => "format",
            Error::Corruption(_) => "corruption",
            Error::UnsupportedVersion { .. } => "unsupported_version",
            Error::Csv(_) => "csv",
            Error::Io(_) => "io",
        }
    }
}
