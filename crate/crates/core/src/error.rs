use thiserror::Error;

/// Binary codec failures. Each variant maps to a distinct machine-readable code.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {found} (expected {expected})")]
    UnsupportedVersion { expected: u32, found: u32 },
    #[error("truncated input at byte offset {offset}: expected {expected} bytes, found {found}")]
    Truncated {
        offset: usize,
        expected: usize,
        found: usize,
    },
    #[error("{extra} trailing bytes after payload ending at offset {offset}")]
    TrailingBytes { offset: usize, extra: usize },
    #[error("invalid header field {field} = {value}")]
    InvalidHeader { field: &'static str, value: u64 },
    #[error("posterior at class-sum pixel (row {row}, col {col}) sums to {sum}")]
    NotNormalized { row: usize, col: usize, sum: f64 },
    #[error("value {value} at flat offset {index} is out of range")]
    ValueOutOfRange { index: usize, value: f64 },
}

impl FormatError {
    pub fn code(&self) -> &'static str {
        match self {
            FormatError::BadMagic { .. } => "bad_magic",
            FormatError::UnsupportedVersion { .. } => "unsupported_version",
            FormatError::Truncated { .. } => "truncated",
            FormatError::TrailingBytes { .. } => "trailing_bytes",
            FormatError::InvalidHeader { .. } => "invalid_header",
            FormatError::NotNormalized { .. } => "not_normalized",
            FormatError::ValueOutOfRange { .. } => "value_out_of_range",
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("pool exhausted: batch needs {requested} regions but only {available} are unlabeled")]
    PoolExhausted { requested: usize, available: usize },
    #[error(
        "instance too large for exhaustive search: n={n}, k={k} (limits n<={max_n}, k<={max_k})"
    )]
    InstanceTooLarge {
        n: usize,
        k: usize,
        max_n: usize,
        max_k: usize,
    },
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable identifier used in machine-readable error reports.
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "invalid_input",
            Error::Config(_) => "config",
            Error::PoolExhausted { .. } => "pool_exhausted",
            Error::InstanceTooLarge { .. } => "instance_too_large",
            Error::Format(f) => f.code(),
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
