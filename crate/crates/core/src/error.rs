use alloc::string::String;

/// Errors surfaced by the core crate.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// A configuration value violates its documented constraints.
    #[error("configuration error: {0}")]
    Config(String),
    /// A function received arguments of the wrong shape or range.
    #[error("argument error: {0}")]
    Argument(String),
    /// Optimization produced a non-finite value.
    #[error("training error: {0}")]
    Training(String),
}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::Error::Config(alloc::format!($($arg)*)) };
}
macro_rules! arg_err {
    ($($arg:tt)*) => { $crate::error::Error::Argument(alloc::format!($($arg)*)) };
}
pub(crate) use arg_err;
pub(crate) use config_err;
