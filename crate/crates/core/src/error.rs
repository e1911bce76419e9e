use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("degenerate distribution: {0}")]
    Degenerate(String),
    #[error("out of supported range: {0}")]
    Range(String),
    #[error("matrix decomposition failed: {0}")]
    Decomposition(String),
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("unsupported operation: {0}")]
    Unsupported(String),
    #[error("index out of range: {0}")]
    Index(String),
    #[error("internal consistency violated: {0}")]
    Consistency(String),
    #[error("format error{}: {msg}", .line.map(|l| format!(" at row {l}")).unwrap_or_default())]
    Format { line: Option<usize>, msg: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    pub(crate) fn format(line: Option<usize>, msg: impl Into<String>) -> Self {
        Error::Format {
            line,
            msg: msg.into(),
        }
    }

    /// Process exit code used by the command-line front end: 1 for
    /// configuration and data problems, 2 for numerical failures at runtime.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Degenerate(_)
            | Error::Decomposition(_)
            | Error::Consistency(_)
            | Error::InvalidState(_) => 2,
            _ => 1,
        }
    }
}
