use std::path::PathBuf;

/// Broad failure category, used by the command-line front end to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numerical,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid intensity {0}: must be > 0")]
    InvalidIntensity(f64),
    #[error("model is not invertible: {0}")]
    NonInvertible(&'static str),
    #[error("degenerate sensitivity: slope {0} must be > 0")]
    DegenerateSensitivity(f64),
    #[error("intensity ordering violated: i_max {i_max} < i_min {i_min}")]
    Ordering { i_max: f64, i_min: f64 },
    #[error("undefined variance: {0}")]
    UndefinedVariance(&'static str),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("singular system: {0}")]
    Singular(&'static str),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("cannot estimate I0: {0}")]
    MissingZeroPlateau(String),
    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },
    #[error("ensemble member {member} failed: {source}")]
    Member {
        member: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("format error in {path}: {detail}")]
    Format { path: PathBuf, detail: String },
    #[error("size mismatch for day {day}: expected {expected} bytes, found {found}")]
    BlobSize { day: usize, expected: u64, found: u64 },
    #[error("unsupported format version {found} (supported: {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Precondition(_) | Error::Config(_) => ErrorKind::Usage,
            Error::Format { .. }
            | Error::BlobSize { .. }
            | Error::UnsupportedVersion { .. }
            | Error::Io { .. }
            | Error::Dimension(_)
            | Error::MissingZeroPlateau(_) => ErrorKind::Data,
            Error::Member { source, .. } => source.kind(),
            _ => ErrorKind::Numerical,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format { path: path.into(), detail: detail.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
