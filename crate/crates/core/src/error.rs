use thiserror::Error;

/// Errors raised across the lab.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// An argument outside the documented domain of a function.
    #[error("domain error: {0}")]
    Domain(String),
    /// A malformed or inconsistent argument.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    /// Combination of options that is recognised but not supported.
    #[error("unsupported: {0}")]
    Unsupported(String),
    /// Dimensions that do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// Cached forward state does not match the requested computation.
    #[error("stale cache: {0}")]
    StaleCache(String),
    /// Requested problem exceeds a hard size cap.
    #[error("size limit exceeded: {0}")]
    SizeLimit(String),
    /// Config or spec could not be parsed or validated.
    #[error("config error: {0}")]
    Config(String),
    /// Filesystem failure.
    #[error("io error: {0}")]
    Io(String),
}

impl Error {
    /// Short stable code used in CSV error rows and the C ABI.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Domain(_) => "domain",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Unsupported(_) => "unsupported",
            Error::Shape(_) => "shape",
            Error::StaleCache(_) => "stale_cache",
            Error::SizeLimit(_) => "size_limit",
            Error::Config(_) => "config",
            Error::Io(_) => "io",
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Domain(msg.into()))
}

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
