use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{0}")]
    InvalidArgument(String),
    #[error("invalid pose: {0}")]
    InvalidPose(String),
    #[error("degenerate scan: {0}")]
    DegenerateScan(String),
    #[error("generation failed: {0}")]
    Generation(String),
    #[error("malformed metadata in {path}: {reason}")]
    MalformedMeta { path: PathBuf, reason: String },
    #[error("shape mismatch in {path}: expected {expected} bytes, found {actual}")]
    ShapeMismatch { path: PathBuf, expected: u64, actual: u64 },
    #[error("schema error in {path}: {reason}")]
    Schema { path: PathBuf, reason: String },
    #[error("non-finite pose in {path} at row {row}")]
    NonFinitePose { path: PathBuf, row: usize },
    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),
    #[error("missing prerequisite: {0}")]
    MissingPrerequisite(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("refusing to overwrite existing {0} (pass --force)")]
    Refused(PathBuf),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Self::InvalidArgument(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    /// Stable, machine-readable category used by the command-line tool.
    pub fn category(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid-argument",
            Error::InvalidPose(_) => "invalid-pose",
            Error::DegenerateScan(_) => "degenerate-scan",
            Error::Generation(_) => "generation",
            Error::MalformedMeta { .. } => "malformed-meta",
            Error::ShapeMismatch { .. } => "shape-mismatch",
            Error::Schema { .. } => "schema",
            Error::NonFinitePose { .. } => "non-finite-pose",
            Error::Incompatible(_) => "incompatible",
            Error::MissingPrerequisite(_) => "missing-prerequisite",
            Error::Divergence(_) => "divergence",
            Error::Config(_) => "config",
            Error::Refused(_) => "refused",
            Error::Io { .. } => "io",
        }
    }
}
