use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised across the forecasting pipeline.
///
/// Variants are grouped by the exit code the command line maps them to:
/// usage problems, data problems and numeric failures.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Usage(String),

    #[error("unknown preset `{name}`; valid presets: {valid}")]
    UnknownPreset { name: String, valid: String },

    #[error("grid contains a pole row at latitude {0}")]
    PoleLatitude(f64),

    #[error("unsupported grid: {0}")]
    UnsupportedGrid(String),

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("empty selection: {0}")]
    EmptySelection(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("irregular time axis: {0}")]
    Cadence(String),

    #[error("pressure level {level} hPa not available for `{variable}`")]
    MissingLevel { variable: String, level: u32 },

    #[error("channel `{0}` has zero variance on the training split")]
    DegenerateChannel(String),

    #[error("no frequency table for channel `{0}`")]
    MissingTable(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("backward called without a preceding forward pass")]
    NoForwardCache,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json { path: path.into(), source }
    }

    /// Process exit code: 2 usage, 3 data, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::UnknownPreset { .. } => 2,
            Error::NonFinite(_) => 4,
            _ => 3,
        }
    }
}
