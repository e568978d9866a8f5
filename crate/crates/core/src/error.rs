use std::path::PathBuf;

use crate::autodiff::Primitive;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: Primitive,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("tensor shape {shape:?} does not hold {len} values")]
    TensorLength { shape: Vec<usize>, len: usize },

    #[error("square root of negative value {0}")]
    NegativeSqrt(f64),

    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("variable belongs to a different graph")]
    ForeignVar,

    #[error("{0}")]
    InvalidArgument(String),

    #[error("too few points: {what} needs at least {required}, got {actual}")]
    TooFewPoints {
        what: &'static str,
        required: usize,
        actual: usize,
    },

    #[error("non-finite value produced by {component} (primitive {primitive})")]
    NonFinite {
        component: String,
        primitive: Primitive,
    },

    #[error("checkpoint mismatch at tensor `{name}`: {detail}")]
    CheckpointMismatch { name: String, detail: String },

    #[error("malformed file {path}: {detail}")]
    Format { path: PathBuf, detail: String },

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
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
