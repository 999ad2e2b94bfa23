//! Multi-label image classification with transformer-decoder label queries.
//!
//! One learnable embedding per category attends over spatial image features;
//! each updated query is scored by a per-class linear head. The crate builds
//! the whole pipeline from scratch: a small autodiff tensor core, the
//! attention decoder, an asymmetric focal loss, ranking and threshold
//! metrics, a synthetic shapes dataset, and a deterministic training loop.

pub mod attention;
pub mod checkpoint;
pub mod data;
pub mod decoder;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod position;
pub mod tensor;
pub mod trainer;
pub mod viz;

pub use tensor::{no_grad, Scalar, Tensor, TensorError};
