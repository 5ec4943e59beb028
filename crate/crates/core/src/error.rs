use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("malformed header field `{field}`: {reason}")]
    Format { field: &'static str, reason: String },

    #[error("unsupported format: {0}")]
    Unsupported(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("degenerate output: {0}")]
    Degenerate(String),

    #[error("class {class} received zero total membership")]
    EmptyClass { class: usize },

    #[error("no background voxel to measure distance against")]
    NoBackground,

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("unknown trace id {0}")]
    UnknownTrace(usize),

    #[error("landmark `{label}` references unknown node {node}")]
    UnknownNode { label: String, node: usize },

    #[error("invalid landmark set: {0}")]
    InvalidLandmarks(String),

    #[error("missing mandatory landmarks: {}", .0.join(", "))]
    IncompleteLandmarks(Vec<String>),

    #[error("ambiguous classification: {0}")]
    Ambiguous(String),

    #[error("segment `{segment}` cannot be resolved: {reason}")]
    Unresolved { segment: String, reason: String },

    #[error("insufficient data: {0}")]
    Insufficient(String),

    #[error("undefined statistic: {0}")]
    Undefined(String),

    #[error("artery names do not match: {}", .0.join(", "))]
    Join(Vec<String>),

    #[error("trace point {index} lies outside the grid")]
    OutOfBounds { index: usize },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    /// Errors caused by the caller's inputs rather than by a processing
    /// stage.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Stage { source, .. } => source.is_validation(),
            Error::Parameter(_)
            | Error::Format { .. }
            | Error::Unsupported(_)
            | Error::DimensionMismatch(_)
            | Error::UnknownTrace(_)
            | Error::UnknownNode { .. }
            | Error::InvalidLandmarks(_)
            | Error::IncompleteLandmarks(_)
            | Error::Join(_)
            | Error::Io { .. }
            | Error::Json { .. } => true,
            _ => false,
        }
    }

    pub(crate) fn at(stage: &'static str) -> impl FnOnce(Error) -> Error {
        move |e| match e {
            Error::Stage { .. } => e,
            e => Error::Stage {
                stage,
                source: Box::new(e),
            },
        }
    }
}
