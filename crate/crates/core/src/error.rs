use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty clip")]
    EmptyClip,

    #[error("time {t} s outside clip [0, {duration}] s")]
    TimeOutOfRange { t: f64, duration: f64 },

    #[error("unknown category `{0}`")]
    UnknownCategory(String),

    #[error("invalid dataset spec: {0}")]
    InvalidSpec(String),

    #[error("unexpected end of data")]
    UnexpectedEof,

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("dimension mismatch for {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: String,
        expected: usize,
        found: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("sampler has no entries")]
    EmptySampler,

    #[error("negative rotor inertia {0}")]
    NegativeInertia(f64),

    #[error("inverted range for {name}: [{lo}, {hi}]")]
    InvertedRange { name: String, lo: f64, hi: f64 },

    #[error("simulation diverged")]
    SimulationDiverged,

    #[error("no recorded graph")]
    NoGraph,

    #[error("non-finite loss: {0}")]
    NonFiniteLoss(String),

    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
