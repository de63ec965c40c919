use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the extraction and scoring pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("sequence gap: frame {0} is missing")]
    SequenceGap(usize),

    #[error("annotation error: {0}")]
    Annotation(String),

    #[error("size error: {0}")]
    Size(String),

    #[error("descriptor patch out of bounds at ({x:.2}, {y:.2})")]
    Boundary { x: f64, y: f64 },

    #[error("insufficient correspondences: {0}")]
    InsufficientCorrespondence(String),

    #[error("singular transform")]
    SingularTransform,

    #[error("stitching failed: frame {0} has no feasible predecessor")]
    StitchingFailure(usize),

    #[error("signal quality error: {0}")]
    SignalQuality(String),

    #[error("length error: {0}")]
    Length(String),

    #[error("segment error: {0}")]
    Segment(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("invalid synthetic spec: {0}")]
    Spec(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True when the error stems from malformed or inconsistent user input
    /// rather than a failure inside the pipeline.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::Io { .. }
                | Error::Format(_)
                | Error::SequenceGap(_)
                | Error::Annotation(_)
                | Error::Spec(_)
                | Error::Config(_)
                | Error::Json(_)
                | Error::Metric(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
