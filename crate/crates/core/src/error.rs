use std::io;

use thiserror::Error;

/// Errors raised across the crate. Variants follow the failure classes the
/// modules document: shape problems, violated call contracts, invalid
/// configuration, bad input data, I/O, and oracle disagreements.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("oracle error: {0}")]
    Oracle(String),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! bail {
    ($kind:ident, $($arg:tt)*) => {
        return Err($crate::error::Error::$kind(format!($($arg)*)))
    };
}
pub(crate) use bail;
