use thiserror::Error;

/// Errors surfaced by the library and the CLI.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("malformed PDU at bit {pos}: {reason}")]
    MalformedPdu { pos: usize, reason: String },
    #[error("capacity exceeded: need {needed} bits, have {available}")]
    Capacity { needed: usize, available: usize },
    #[error("config error: {0}")]
    Config(String),
    #[error("calibration failed: {0}")]
    Calibration(String),
    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("internal consistency: {0}")]
    Consistency(String),
    #[error("log integrity: {0}")]
    Integrity(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Stable machine-readable category, used for CLI exit reporting.
    pub fn category(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid-argument",
            Error::Precondition(_) => "precondition",
            Error::MalformedPdu { .. } => "malformed-pdu",
            Error::Capacity { .. } => "capacity",
            Error::Config(_) => "config",
            Error::Calibration(_) => "calibration-failure",
            Error::Parse { .. } => "parse",
            Error::Consistency(_) => "internal-consistency",
            Error::Integrity(_) => "integrity",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) | Error::Config(_) => 2,
            Error::Parse { .. } | Error::Json(_) | Error::Csv(_) => 3,
            Error::Io(_) => 4,
            Error::Calibration(_) => 5,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
