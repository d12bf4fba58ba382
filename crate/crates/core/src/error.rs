use std::error::Error;
use std::fmt;

/// Error type shared across the toolkit.
#[derive(Debug)]
pub enum CoreError {
    /// Tensor or layer shape mismatch.
    Shape(String),
    /// Invalid configuration value.
    Config(String),
    /// Dataset or matrix contents violate a precondition.
    Data(String),
    /// A loss or gradient became NaN/Inf.
    NonFinite(String),
    /// File format violation (bad magic, version, truncation).
    Format(String),
    Io(std::io::Error),
    Json(serde_json::Error),
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::Shape(msg) => write!(f, "shape error: {}", msg),
            CoreError::Config(msg) => write!(f, "config error: {}", msg),
            CoreError::Data(msg) => write!(f, "data error: {}", msg),
            CoreError::NonFinite(msg) => write!(f, "non-finite value: {}", msg),
            CoreError::Format(msg) => write!(f, "format error: {}", msg),
            CoreError::Io(e) => write!(f, "io error: {}", e),
            CoreError::Json(e) => write!(f, "json error: {}", e),
        }
    }
}

impl Error for CoreError {
    fn source(&self) -> Option<&(dyn Error + 'static)> {
        match self {
            CoreError::Io(e) => Some(e),
            CoreError::Json(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for CoreError {
    fn from(e: std::io::Error) -> Self {
        CoreError::Io(e)
    }
}

impl From<serde_json::Error> for CoreError {
    fn from(e: serde_json::Error) -> Self {
        CoreError::Json(e)
    }
}

pub type CoreResult<T> = Result<T, CoreError>;
