use std::path::PathBuf;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("empty input: {0}")]
    Empty(String),
    #[error("zero-extent cloud: all points coincide")]
    ZeroExtent,
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("rank deficient: {0}")]
    RankDeficient(String),
    #[error("singular system: {0}")]
    Singular(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    #[error("malformed data: {0}")]
    Malformed(String),
    #[error("point-count mismatch in {file}: expected {expected}, found {found}")]
    PointCount {
        file: String,
        expected: usize,
        found: usize,
    },
    #[error("unknown category id {0}")]
    UnknownCategory(u32),
    #[error("missing manifest.json in {}", .0.display())]
    MissingManifest(PathBuf),
    #[error("config mismatch: {0}")]
    ConfigMismatch(String),
    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt file: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFinite(_) | Error::Singular(_) | Error::RankDeficient(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
