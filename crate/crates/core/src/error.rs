use thiserror::Error;

#[derive(Debug, Error)]
pub enum SbtError {
    /// Tensor extents do not satisfy an operator's shape rule.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// A caller broke a documented precondition (non-scalar loss, degenerate box, ...).
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("config error: {0}")]
    Config(String),
    /// Weight file is not a well-formed `SBTW` stream.
    #[error("format error: {0}")]
    Format(String),
    /// Weight file is well-formed but does not fit the target model.
    #[error("load error: {0}")]
    Load(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SbtError>;

macro_rules! dim_err {
    ($($arg:tt)*) => {
        $crate::error::SbtError::Dimension(format!($($arg)*))
    };
}

macro_rules! contract_err {
    ($($arg:tt)*) => {
        $crate::error::SbtError::Contract(format!($($arg)*))
    };
}

macro_rules! config_err {
    ($($arg:tt)*) => {
        $crate::error::SbtError::Config(format!($($arg)*))
    };
}

pub(crate) use config_err;
pub(crate) use contract_err;
pub(crate) use dim_err;
