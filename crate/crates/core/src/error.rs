use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed manifest {path}")]
    Manifest {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("bad magic in {path}: expected {expected:?}, found {found:?}")]
    BadMagic {
        path: PathBuf,
        expected: [u8; 8],
        found: [u8; 8],
    },

    #[error("manifest/binary mismatch: {0}")]
    Mismatch(String),

    #[error("invalid archive: {0}")]
    InvalidArchive(String),

    #[error("row {row} has zero norm")]
    ZeroNorm { row: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("incomplete template/class grid: {0}")]
    IncompleteGrid(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("stale tape: parameters changed since the forward pass")]
    StaleTape,

    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
