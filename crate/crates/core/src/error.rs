use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, XceError>;

#[derive(Debug, Error)]
pub enum XceError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("singular matrix: {0}")]
    SingularMatrix(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("degenerate channel: {0}")]
    DegenerateChannel(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}: {value}")]
    NonFinite { epoch: usize, batch: usize, value: f64 },

    #[error("io error: {0}")]
    Io(#[from] io::Error),
}

impl XceError {
    /// Stable machine-parsable code, printed as the prefix of CLI error lines.
    pub fn code(&self) -> &'static str {
        match self {
            XceError::InvalidArgument(_) => "E_INVALID_ARGUMENT",
            XceError::SingularMatrix(_) => "E_SINGULAR",
            XceError::Shape(_) => "E_SHAPE",
            XceError::DegenerateChannel(_) => "E_DEGENERATE",
            XceError::Config(_) => "E_CONFIG",
            XceError::Format(_) => "E_FORMAT",
            XceError::Contract(_) => "E_CONTRACT",
            XceError::NonFinite { .. } => "E_NON_FINITE",
            XceError::Io(_) => "E_IO",
        }
    }
}

macro_rules! bail {
    ($variant:ident, $($arg:tt)*) => {
        return Err($crate::error::XceError::$variant(format!($($arg)*)))
    };
}
pub(crate) use bail;
