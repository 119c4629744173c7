use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A tensor shape does not satisfy an operation's requirements.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// A configuration value is invalid (groups, divisibility, unknown keys).
    #[error("configuration error: {0}")]
    Config(String),
    /// A caller broke an API contract (non-scalar loss, NaN input, ...).
    #[error("contract error: {0}")]
    Contract(String),
    /// A file is not a well-formed checkpoint / dataset entry.
    #[error("format error: {0}")]
    Format(String),
    /// A checkpoint does not match the architecture it is loaded into.
    #[error("compatibility error: {0}")]
    Compatibility(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! dim_err {
    ($($arg:tt)*) => { $crate::error::Error::Dimension(format!($($arg)*)) };
}
macro_rules! cfg_err {
    ($($arg:tt)*) => { $crate::error::Error::Config(format!($($arg)*)) };
}
pub(crate) use cfg_err;
pub(crate) use dim_err;
