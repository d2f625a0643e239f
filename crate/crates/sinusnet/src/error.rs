//! Error type shared across the crate.

use std::fmt;
use std::path::PathBuf;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// All failure modes surfaced by the library.
#[derive(Debug)]
pub enum Error {
    /// File could not be read or written.
    Io { path: PathBuf, source: std::io::Error },
    /// A file exists but does not parse as the expected format.
    Format { path: PathBuf, reason: String },
    /// Voxel data failed validation (NaN/Inf values).
    NonFiniteVoxels { id: String, count: usize },
    /// A scalar argument is outside its allowed domain.
    Argument(String),
    /// Array shapes are incompatible with the requested operation.
    Dimension(String),
    /// A configuration value violates an invariant.
    Config(String),
    /// Dataset partitioning could not satisfy its constraints.
    Split(String),
    /// A caller violated an operation's precondition.
    Contract(String),
    /// A metric is undefined for the given inputs.
    Metric(String),
    /// A required artifact (checkpoint, manifest) is missing or stale.
    State(String),
    /// Checkpoint was produced under a different model specification.
    SpecHashMismatch { expected: String, found: String },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Io { path, source } => write!(f, "i/o error on {}: {}", path.display(), source),
            Error::Format { path, reason } => {
                write!(f, "malformed file {}: {}", path.display(), reason)
            }
            Error::NonFiniteVoxels { id, count } => {
                write!(f, "volume '{}' contains {} non-finite voxel(s)", id, count)
            }
            Error::Argument(msg) => write!(f, "invalid argument: {}", msg),
            Error::Dimension(msg) => write!(f, "dimension error: {}", msg),
            Error::Config(msg) => write!(f, "invalid configuration: {}", msg),
            Error::Split(msg) => write!(f, "split error: {}", msg),
            Error::Contract(msg) => write!(f, "contract violation: {}", msg),
            Error::Metric(msg) => write!(f, "metric undefined: {}", msg),
            Error::State(msg) => write!(f, "missing or invalid state: {}", msg),
            Error::SpecHashMismatch { expected, found } => write!(
                f,
                "checkpoint spec hash {} does not match model spec hash {}",
                found, expected
            ),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format { path: path.into(), reason: reason.into() }
    }
}
