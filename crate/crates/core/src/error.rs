use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("all active particles coincide; cannot normalize")]
    DegenerateSpread,

    #[error("partial-cloud removal deactivated every particle")]
    EmptyPartial,

    #[error("measure has no active particles")]
    AllMasked,

    #[error("attention source has no active rows")]
    AllSourcesMasked,

    #[error("latent dimension {0} is odd; the coupling layer needs an even split")]
    OddLatentDim(usize),

    #[error("gradient output must be a scalar, got shape {0:?}")]
    NotScalarOutput(Vec<usize>),

    #[error("non-finite gradient at step {step}")]
    NonFiniteGradient { step: usize },

    #[error("every diagnostic term was skipped (vanishing gradient norm)")]
    AllTermsSkipped,

    #[error("transport problem too large: lcm({n}, {m}) scaling exceeds the supported size")]
    UnsupportedScale { n: usize, m: usize },

    #[error("{path}:{line}: parse error: {msg}")]
    Parse {
        path: PathBuf,
        line: u64,
        msg: String,
    },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("missing parameter `{0}`")]
    MissingParam(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
