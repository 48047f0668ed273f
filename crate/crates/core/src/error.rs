use std::path::PathBuf;

/// Errors produced anywhere in the estimation pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch in {what}: expected {expected}, found {found}")]
    ShapeMismatch {
        what: &'static str,
        expected: String,
        found: String,
    },

    #[error("solver diverged at iteration {iteration}: objective {objective:e} exceeds 10x the initial value {initial:e}")]
    Diverged {
        iteration: usize,
        objective: f64,
        initial: f64,
    },

    #[error("dense size guard exceeded: {what} needs {requested} elements, limit is {limit}")]
    SizeGuard {
        what: &'static str,
        requested: usize,
        limit: usize,
    },

    #[error("parse error in field `{field}`: {message}")]
    Parse { field: String, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("reference channel has zero energy")]
    ZeroTruth,

    #[error("empty dataset")]
    EmptyDataset,

    #[error("unknown estimator `{name}`; valid names: {valid}")]
    UnknownEstimator { name: String, valid: String },
}

impl Error {
    /// Short stable identifier used in machine-readable CLI and FFI error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid-argument",
            Error::ShapeMismatch { .. } => "shape-mismatch",
            Error::Diverged { .. } => "diverged",
            Error::SizeGuard { .. } => "size-guard",
            Error::Parse { .. } => "parse",
            Error::Io { .. } => "io",
            Error::ZeroTruth => "zero-truth",
            Error::EmptyDataset => "empty-dataset",
            Error::UnknownEstimator { .. } => "unknown-estimator",
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn shape(what: &'static str, expected: impl ToString, found: impl ToString) -> Self {
        Error::ShapeMismatch {
            what,
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            field: field.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
