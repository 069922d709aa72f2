use std::path::PathBuf;

use thiserror::Error;

/// Every failure the library can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed json in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("invalid manifest: {0}")]
    InvalidManifest(String),

    #[error("corrupt archive: {0}")]
    CorruptArchive(String),

    #[error("unsupported format version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },

    #[error("layer {0} not present in archive")]
    LayerNotFound(u32),

    #[error("degenerate vector: norm product {0:e} below cosine threshold")]
    DegenerateVector(f64),

    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("training diverged: {0}")]
    DivergedTraining(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("probe dimension {0} cannot be visualized (need 2 or 3)")]
    NotVisualizable(usize),

    #[error("undefined: {0}")]
    Undefined(String),

    #[error("domain error: {0}")]
    DomainError(String),

    #[error("split too small: {n} instances with test fraction {fraction}")]
    SplitTooSmall { n: usize, fraction: f64 },

    #[error("invalid probe file: {0}")]
    InvalidProbe(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the optimizer rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::DivergedTraining(_))
    }
}
