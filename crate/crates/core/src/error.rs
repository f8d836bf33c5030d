use std::path::PathBuf;

/// Errors raised anywhere in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("invalid mask: {0}")]
    InvalidMask(String),

    #[error("invalid plan: {0}")]
    InvalidPlan(String),

    /// A configuration override named a key the plan does not have.
    #[error("unknown configuration key {0:?}")]
    UnknownKey(String),

    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("stage {stage}: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_stage(stage: impl Into<String>, source: Error) -> Self {
        Error::Stage {
            stage: stage.into(),
            source: Box::new(source),
        }
    }

    pub fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// True for errors that signal a broken structural invariant (graph,
    /// mask or plan) rather than an I/O or argument problem.
    pub fn is_invariant_violation(&self) -> bool {
        match self {
            Error::InvalidGraph(_) | Error::InvalidMask(_) | Error::InvalidPlan(_) => true,
            Error::Stage { source, .. } => source.is_invariant_violation(),
            _ => false,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
