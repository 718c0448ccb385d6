use thiserror::Error;

/// Errors raised anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),
    #[error("invalid frequency band: {0}")]
    InvalidBand(String),
    #[error("signal too short: need more than {needed} samples, got {got}")]
    SignalTooShort { needed: usize, got: usize },
    #[error("epoch window out of bounds: {0}")]
    EpochOutOfBounds(String),
    #[error("invalid decimation factor {factor} for {samples} samples")]
    InvalidFactor { factor: usize, samples: usize },
    #[error("flash constraint unsatisfiable: {0}")]
    ConstraintUnsatisfiable(String),
    #[error("invalid protocol: {0}")]
    InvalidProtocol(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("unknown architecture `{0}`")]
    UnknownArchitecture(String),
    #[error("corrupt model: {0}")]
    CorruptModel(String),
    #[error("degenerate labels: {0}")]
    DegenerateLabels(String),
    #[error("stepwise selection admitted no feature")]
    EmptyModel,
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("incomplete selection block: {0}")]
    IncompleteBlock(String),
    #[error("invalid window: {0}")]
    InvalidWindow(String),
    #[error("pipeline is not fitted")]
    NotFitted,
    #[error("validation error at `{path}`: {message}")]
    Validation { path: String, message: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Coarse error family, used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Validation,
    Numeric,
    Io,
}

impl ErrorCategory {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorCategory::Validation => 2,
            ErrorCategory::Numeric => 3,
            ErrorCategory::Io => 4,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCategory::Validation => "validation",
            ErrorCategory::Numeric => "numeric",
            ErrorCategory::Io => "io",
        }
    }
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::NotPositiveDefinite(_)
            | Error::Numerical(_)
            | Error::ConstraintUnsatisfiable(_)
            | Error::EmptyModel
            | Error::UndefinedMetric(_) => ErrorCategory::Numeric,
            Error::Io(_) => ErrorCategory::Io,
            _ => ErrorCategory::Validation,
        }
    }

    pub fn validation(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            path: path.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
