use thiserror::Error;

/// Crate-wide error type. `InvalidArgument` covers contract violations the
/// caller can fix; `InvalidState` covers misuse of an otherwise valid value
/// (e.g. evaluating an uninitialized model); `NonFinite` aborts training with
/// enough context to locate the blow-up.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

/// Early-return with `Error::InvalidArgument` when a precondition fails.
#[macro_export]
macro_rules! ensure_arg {
    ($cond:expr, $($msg:tt)*) => {
        if !$cond {
            return Err($crate::Error::InvalidArgument(format!($($msg)*)));
        }
    };
}
