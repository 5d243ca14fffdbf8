//! Differentiable region-selection detection head built from scratch:
//! dense f64 tensors with hand-written backward passes, an affine region
//! selection network, bilinear regionlet warping with analytic gradients
//! w.r.t. both the feature map and the affine parameters, soft gating,
//! regionlet pooling, and a synthetic shape-detection benchmark with a
//! VOC-style mAP evaluator.
//!
//! Everything is deterministic given a seed: no global RNG, fixed summation
//! order, no wall-clock values in metric outputs.

pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod gate;
pub mod gradcheck;
pub mod head;
pub mod layers;
pub mod ppm;
pub mod region;
pub mod rng;
pub mod rsn;
pub mod tensor;
pub mod train;
pub mod warp;

pub use tensor::Tensor;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("data length {got} does not match shape {shape:?} (expected {expected})")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("{0}")]
    InvalidArgument(String),
    #[error("unknown config key `{0}`")]
    ConfigKey(String),
    #[error("invalid value for config key `{key}`: {message}")]
    ConfigValue { key: String, message: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Error {
        Error::InvalidArgument(msg.into())
    }

    pub fn non_finite(label: impl Into<String>) -> Error {
        Error::NonFinite(label.into())
    }
}
