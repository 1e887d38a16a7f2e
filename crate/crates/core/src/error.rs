use std::path::PathBuf;

/// Errors produced anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    Op { op: &'static str, msg: String },

    #[error("backward: {0}")]
    Backward(String),

    #[error("non-finite {what}")]
    NonFinite { what: String },

    #[error("training diverged at epoch {epoch}, step {step}: loss {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("{path}: invalid UTF-8 at byte offset {offset}")]
    Utf8 { path: PathBuf, offset: usize },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("unsupported {what} version {found} (expected {expected})")]
    Version {
        what: &'static str,
        found: u64,
        expected: u64,
    },

    #[error("{path}: malformed config: {msg}")]
    Config { path: PathBuf, msg: String },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable short name for machine-readable error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } | Error::Op { .. } | Error::Backward(_) => "internal",
            Error::NonFinite { .. } | Error::Diverged { .. } => "diverged",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Parse { .. } | Error::Utf8 { .. } => "malformed_input",
            Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => "missing_file",
            Error::Io { .. } => "io",
            Error::Checkpoint(_) => "bad_checkpoint",
            Error::Version { .. } => "version_mismatch",
            Error::Config { .. } => "malformed_config",
            Error::Json(_) => "malformed_json",
        }
    }

    pub(crate) fn op(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Op { op, msg: msg.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
