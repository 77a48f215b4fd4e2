use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// A caller-supplied argument violates a precondition.
    InvalidArgument(String),
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },
    /// The regularized kernel matrix could not be factorized even after jitter escalation.
    SolveFailed {
        lambda: f64,
    },
    NonFinite {
        context: String,
    },
    Idx(String),
    Io(String),
    Format(String),
    /// A client job failed inside an orchestrated run.
    Client {
        client: usize,
        source: Box<Error>,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::DimensionMismatch {
                context,
                expected,
                found,
            } => write!(f, "{context}: expected dimension {expected}, found {found}"),
            Error::SolveFailed { lambda } => write!(
                f,
                "kernel system is not positive definite (last regularization tried: {lambda:e})"
            ),
            Error::NonFinite { context } => write!(f, "non-finite value: {context}"),
            Error::Idx(msg) => write!(f, "idx: {msg}"),
            Error::Io(msg) => write!(f, "io: {msg}"),
            Error::Format(msg) => write!(f, "format: {msg}"),
            Error::Client { client, source } => write!(f, "client {client}: {source}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Client { source, .. } => Some(source.as_ref()),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
