use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual} ({context})")]
    DimensionMismatch {
        expected: usize,
        actual: usize,
        context: &'static str,
    },
    #[error("resolution mismatch: {a:?} vs {b:?}")]
    ResolutionMismatch { a: (usize, usize), b: (usize, usize) },
    #[error("empty mask")]
    EmptyMask,
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("degenerate weighted average: the combined embedding has zero norm")]
    DegenerateAverage,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("overlapping masklets {first} and {second} at frame {frame}, pixel ({row}, {col})")]
    OverlappingMasklets {
        first: u32,
        second: u32,
        frame: usize,
        row: usize,
        col: usize,
    },
    #[error("masklet {0} has no visible frames")]
    InvisibleMasklet(u32),
    #[error("missing bank entry for masklet {0}")]
    MissingBankEntry(u32),
    #[error("segmenter failed at frame {frame}: {message}")]
    Segmenter { frame: usize, message: String },
    #[error("tracker failed (seed frame {frame}): {message}")]
    Tracker { frame: usize, message: String },
    #[error("embedder failed: {0}")]
    Embedder(String),
    #[error("training diverged at {stage} {step}: loss = {loss}")]
    Divergence {
        stage: &'static str,
        step: usize,
        loss: f64,
    },
    #[error("no covered pixels to supervise")]
    NoSupervision,
    #[error("format error in {what}: {message}")]
    Format { what: &'static str, message: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn format(what: &'static str, message: impl Into<String>) -> Self {
        Error::Format {
            what,
            message: message.into(),
        }
    }
}
