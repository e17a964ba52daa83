use std::path::PathBuf;

/// Errors raised anywhere in the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("expected a scalar output, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("variable is not recorded on this tape")]
    NotOnTape,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("input outside the [0,1] domain (coordinate {index} = {value})")]
    DomainViolation { index: usize, value: f64 },
    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Diverged { epoch: usize },
    #[error("malformed data file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable machine-readable kind, used in CLI error JSON and FFI codes.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::NonFinite(_) => "non_finite",
            Error::NotScalar(_) => "not_scalar",
            Error::NotOnTape => "not_on_tape",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::DomainViolation { .. } => "domain_violation",
            Error::Diverged { .. } => "diverged",
            Error::Format { .. } => "format",
            Error::Io { .. } => "io",
            Error::Serde(_) => "serde",
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
