use alloc::string::String;

/// Errors produced by the core library.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("unsupported palette size {0}: at most 256 classes")]
    UnsupportedSize(usize),
    #[error("empty condition: no class bit is set")]
    EmptyCondition,
    #[error("cannot form a negative: batch size {0} < 2")]
    BatchTooSmall(usize),
    #[error("non-finite value at step {step}: {summary}")]
    NonFinite { step: usize, summary: String },
    #[error("no evaluable class: {0}")]
    NoEvaluableClass(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

macro_rules! bail {
    ($kind:ident, $($arg:tt)*) => {
        return Err($crate::error::Error::$kind(alloc::format!($($arg)*)))
    };
}
pub(crate) use bail;
