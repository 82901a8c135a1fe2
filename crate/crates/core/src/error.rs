use std::fmt;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A precondition on shapes, ranges or configuration was violated.
    #[error("contract violation: {0}")]
    Contract(String),
    /// A scalar argument was outside its mathematical domain.
    #[error("domain error: {0}")]
    Domain(String),
    /// A computation produced non-finite values or degenerated.
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("parse error at byte {offset}: {msg}")]
    Parse { offset: u64, msg: String },
    #[error("unknown {kind} `{name}` (registered: {available})")]
    Lookup {
        kind: &'static str,
        name: String,
        available: String,
    },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn contract(msg: impl fmt::Display) -> Self {
        Error::Contract(msg.to_string())
    }

    pub fn numeric(msg: impl fmt::Display) -> Self {
        Error::Numeric(msg.to_string())
    }

    pub fn parse(offset: u64, msg: impl fmt::Display) -> Self {
        Error::Parse {
            offset,
            msg: msg.to_string(),
        }
    }

    /// True for failures caused by non-finite or degenerate numerics.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Numeric(_))
    }
}

/// Returns early with [`Error::Contract`] when the condition does not hold.
#[macro_export]
macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        let holds: bool = $cond;
        if !holds {
            return Err($crate::Error::Contract(format!($($arg)+)));
        }
    };
}
