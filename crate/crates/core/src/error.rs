use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("EmptyMask: mask has no foreground pixels")]
    EmptyMask,
    #[error("EmptyInput: token list is empty")]
    EmptyInput,
    #[error("InvalidConfig: {0}")]
    InvalidConfig(String),
    #[error("OutOfBounds: {0}")]
    OutOfBounds(String),
    #[error("DimMismatch: {0}")]
    DimMismatch(String),
    #[error(
        "DegenerateImage: image must be at least 2x2 for relative positions, got {width}x{height}"
    )]
    DegenerateImage { width: usize, height: usize },
    #[error("ZeroNormToken: token {0} has zero norm")]
    ZeroNormToken(usize),
    #[error("NegativeTimestamp: {0}")]
    NegativeTimestamp(f64),
    #[error("MissingVision: vision-object layout requires vision tokens")]
    MissingVision,
    #[error("UnexpectedVision: object-only layout must not carry vision tokens")]
    UnexpectedVision,
    #[error("Overflow: FLOPs count exceeds 128-bit range")]
    Overflow,
    #[error("FormatError: {0}")]
    Format(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

/// Coarse error class, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Io,
    Format,
    Pipeline,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Io(_) => ErrorClass::Io,
            Error::Format(_) | Error::MissingVision | Error::UnexpectedVision => ErrorClass::Format,
            _ => ErrorClass::Pipeline,
        }
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub(crate) fn dims(msg: impl Into<String>) -> Self {
        Error::DimMismatch(msg.into())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}
