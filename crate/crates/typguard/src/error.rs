use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    /// Corrupt or unrecognised file header.
    #[error("format error: {0}")]
    Format(String),

    /// Payload shorter or longer than the header promises.
    #[error("length error: expected {expected} bytes, found {actual}")]
    Length { expected: u64, actual: u64 },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("degenerate vector: row {row} has zero norm")]
    DegenerateVector { row: usize },

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },

    #[error("parameter error: {0}")]
    Parameter(String),

    /// A caller broke a documented precondition (e.g. passed unnormalized rows).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("insufficient data: need at least {needed} points, got {got}")]
    InsufficientData { needed: usize, got: usize },

    /// Recall and Coverage need a test batch of at least `k + 1` points.
    /// Callers should defer, or fall back to the precision/density subset.
    #[error(
        "batch too small: two-sample features need at least {required} test points, got {actual}; \
         defer the batch or score with the PD subset"
    )]
    BatchTooSmall { required: usize, actual: usize },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("metric error: {0}")]
    Metric(String),
}

impl Error {
    /// Stable, machine-readable name of the error variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Format(_) => "format",
            Error::Length { .. } => "length",
            Error::Validation(_) => "validation",
            Error::DegenerateVector { .. } => "degenerate_vector",
            Error::Alignment(_) => "alignment",
            Error::Dimension { .. } => "dimension",
            Error::Parameter(_) => "parameter",
            Error::Contract(_) => "contract",
            Error::InsufficientData { .. } => "insufficient_data",
            Error::BatchTooSmall { .. } => "batch_too_small",
            Error::Protocol(_) => "protocol",
            Error::Parse { .. } => "parse",
            Error::Metric(_) => "metric",
        }
    }
}
