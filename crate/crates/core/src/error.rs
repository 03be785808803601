use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("cap exceeded: {0}")]
    CapExceeded(String),

    #[error("calibration failed: {0}")]
    CalibrationFailed(String),

    #[error("trial {trial} failed for variant {variant}: {source}")]
    TrialFailed {
        trial: u64,
        variant: String,
        #[source]
        source: Box<Error>,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Stable short name used by the command line on standard error.
    pub fn name(&self) -> &'static str {
        match self {
            Error::InvalidParameter(_) => "invalid-parameter",
            Error::CapExceeded(_) => "cap-exceeded",
            Error::CalibrationFailed(_) => "calibration-failed",
            Error::TrialFailed { source, .. } => source.name(),
            Error::Io(_) => "io-error",
            Error::Json(_) => "json-error",
            Error::Csv(_) => "csv-error",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidParameter(msg.into())
}
