use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("backward needs a single-element root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value at parameter {param}, coordinate {index}")]
    NonFinite { param: usize, index: usize },

    #[error("sample {sample}: token {token} at position {position} is outside vocabulary of size {vocab}")]
    TokenOutOfRange {
        sample: usize,
        position: usize,
        token: u32,
        vocab: usize,
    },

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint latent_dim mismatch: config has {config}, tensors have {checkpoint}")]
    LatentDimMismatch { config: usize, checkpoint: usize },

    #[error("dimension mismatch: model expects {expected}, data has {found}")]
    DimensionMismatch { expected: String, found: String },

    #[error("AUC undefined: every class lacks either positives or negatives")]
    AllClassesUndefined,

    #[error("non-finite loss at batch {batch}: {breakdown}")]
    NonFiniteLoss {
        batch: u64,
        breakdown: crate::objectives::LossBreakdown,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
