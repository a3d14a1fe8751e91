use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u8),

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("blob length mismatch: expected {expected} bytes, found {actual}")]
    BlobLengthMismatch { expected: usize, actual: usize },

    #[error("truncated stream: {0}")]
    Truncated(String),

    #[error("dimension incompatibility at layer {layer}: expected n_i = {expected}, found {found}")]
    DimensionIncompatibility {
        layer: usize,
        expected: usize,
        found: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("layer {0} has no successor; reordering must be skipped")]
    NoSuccessor(usize),

    #[error("invalid permutation: {0}")]
    InvalidPermutation(String),

    #[error("alpha must exceed 1 and be at most 16 (got {0})")]
    InvalidAlpha(f64),

    #[error("cannot form {k} clusters from {n} samples")]
    TooManyClusters { k: usize, n: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("index {index} out of range for {bits}-bit packing")]
    IndexOutOfRange { index: u32, bits: u32 },

    #[error("non-finite loss at step {step}; the learning rate is likely too high")]
    NonFiniteLoss { step: usize },

    #[error("optimization diverged at step {step}: loss {loss} exceeds 1e3 x initial {initial}")]
    Diverged { step: usize, loss: f64, initial: f64 },

    #[error("layer {layer}: {source}")]
    Layer {
        layer: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// Wrap an error with the index of the layer that produced it.
    pub fn at_layer(self, layer: usize) -> Self {
        Error::Layer {
            layer,
            source: Box::new(self),
        }
    }

    /// True for failures of the numeric optimization itself (as opposed to bad input data).
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::NonFiniteLoss { .. } | Error::Diverged { .. } => true,
            Error::Layer { source, .. } => source.is_numeric(),
            _ => false,
        }
    }
}
