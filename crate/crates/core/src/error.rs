use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("non-monotonic timestamp in {stream} stream at index {index}")]
    NonMonotonic { stream: String, index: usize },

    #[error("{stream} stream is empty")]
    EmptyStream { stream: String },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("mask contains no pixels")]
    EmptyMask,

    #[error("ellipse fit needs at least 5 boundary points, got {0}")]
    TooFewBoundaryPoints(usize),

    #[error("conic fit is degenerate")]
    DegenerateConic,

    #[error("fitted conic is not an ellipse")]
    NotAnEllipse,

    #[error("noise profile too short: {got_s:.3} s, need at least {need_s:.3} s")]
    NoiseProfileTooShort { got_s: f64, need_s: f64 },

    #[error("series timestamps not strictly increasing at index {0}")]
    UnsortedSeries(usize),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("feature schema mismatch: classifier expects {expected} features, got {got}")]
    SchemaMismatch { expected: usize, got: usize },

    #[error("empty point cloud")]
    EmptyCloud,

    #[error("twin has no occupied voxels")]
    EmptyTwin,

    #[error("infeasible build spec: {0}")]
    InfeasibleSpec(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse { path: path.into(), line, msg: msg.into() }
    }

    /// True for errors caused by missing/unreadable files rather than bad data.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
