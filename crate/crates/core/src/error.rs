//! Error type shared across the engine.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("manifest json error: {0}")]
    ManifestJson(#[from] serde_json::Error),

    #[error("empty container")]
    EmptyContainer,

    #[error("duplicate tensor name: {0}")]
    DuplicateName(String),

    #[error("malformed container: {0}")]
    MalformedContainer(String),

    #[error("payload length mismatch: {0}")]
    PayloadLengthMismatch(String),

    #[error("unsupported dtype `{dtype}` for tensor {name}")]
    UnsupportedDtype { name: String, dtype: String },

    #[error("non-finite value in tensor {0}")]
    NonFinite(String),

    #[error("manifest mismatch: {0}")]
    ManifestMismatch(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("zero-norm input: {0}")]
    ZeroNorm(String),

    #[error("invalid hyperparameter: {0}")]
    InvalidHyperparameter(String),

    #[error("invalid recipe: {0}")]
    InvalidRecipe(String),

    #[error("missing prerequisite: {0}")]
    MissingPrerequisite(String),

    #[error("negative fisher entry: {0}")]
    NegativeFisher(String),

    #[error("gram matrix not symmetric: {0}")]
    AsymmetricGram(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("singular system: {0}")]
    SingularSystem(String),

    #[error("missing dimension for cost formula: {0}")]
    MissingDim(String),

    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
}

impl Error {
    /// Prefixes a data error with the parameter-block name it occurred in.
    /// Drivers use this to turn kernel-level diagnostics (which only know
    /// flat indices) into messages that name the offending tensor.
    pub fn in_block(self, name: &str) -> Self {
        match self {
            Error::ShapeMismatch(m) => Error::ShapeMismatch(format!("{name}: {m}")),
            Error::ZeroNorm(m) => Error::ZeroNorm(format!("{name}: {m}")),
            Error::NegativeFisher(m) => Error::NegativeFisher(format!("{name}: {m}")),
            Error::AsymmetricGram(m) => Error::AsymmetricGram(format!("{name}: {m}")),
            Error::DimensionMismatch(m) => Error::DimensionMismatch(format!("{name}: {m}")),
            Error::SingularSystem(m) => Error::SingularSystem(format!("{name}: {m}")),
            Error::NonFinite(m) => Error::NonFinite(format!("{name}: {m}")),
            other => other,
        }
    }
}
