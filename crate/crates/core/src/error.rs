use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("invalid token {token} at level {level} (vocabulary size {k})")]
    InvalidToken { token: u32, level: usize, k: usize },
    #[error("malformed delayed grid: {0}")]
    MalformedGrid(String),
    #[error("snr is undefined for a silent reference")]
    UndefinedSnr,
    #[error("offset is undefined: {0}")]
    UndefinedOffset(String),
    #[error("numeric overflow: {0}")]
    NumericOverflow(String),
    #[error("incompatible artifact {what}: expected {expected}, found {found}")]
    Incompatible {
        what: String,
        expected: String,
        found: String,
    },
    #[error("no samples: {0}")]
    NoSamples(String),
    #[error("bad file format in {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Process exit status used by the command line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Incompatible { .. } | Error::Format { .. } => 3,
            Error::NumericOverflow(_) => 4,
            _ => 2,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
