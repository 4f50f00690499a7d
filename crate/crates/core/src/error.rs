use std::fmt;

/// Error kinds shared across the crate. The `kind()` tag is what the CLI
/// prints on its one-line error report.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("geometry: {0}")]
    Geometry(String),
    #[error("config: {0}")]
    Config(String),
    #[error("contract: {0}")]
    Contract(String),
    #[error("numeric: {0}")]
    Numeric(String),
    #[error("planning: {0}")]
    Planning(String),
    #[error("corrupt: {0}")]
    Corrupt(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Geometry(_) => ErrorKind::Geometry,
            Error::Config(_) => ErrorKind::Config,
            Error::Contract(_) => ErrorKind::Contract,
            Error::Numeric(_) => ErrorKind::Numeric,
            Error::Planning(_) => ErrorKind::Planning,
            Error::Corrupt(_) => ErrorKind::Corrupt,
            Error::Io(_) => ErrorKind::Io,
            Error::Json(_) => ErrorKind::Corrupt,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Geometry,
    Config,
    Contract,
    Numeric,
    Planning,
    Corrupt,
    Io,
}

impl fmt::Display for ErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ErrorKind::Geometry => "geometry",
            ErrorKind::Config => "config",
            ErrorKind::Contract => "contract",
            ErrorKind::Numeric => "numeric",
            ErrorKind::Planning => "planning",
            ErrorKind::Corrupt => "corrupt",
            ErrorKind::Io => "io",
        };
        f.write_str(s)
    }
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! bail {
    ($kind:ident, $($arg:tt)*) => {
        return Err($crate::error::Error::$kind(format!($($arg)*)))
    };
}
pub(crate) use bail;
