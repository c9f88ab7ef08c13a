//! Cross-reference network for few-shot semantic segmentation.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`], [`autograd`]: dense tensors and a reverse-mode tape,
//!   generic over [`Scalar`] (`f32` for training, `f64` for gradient checks).
//! * [`model`]: Siamese encoder, cross-reference gating with its
//!   co-occurrence head, foreground pooling and the condition block.
//! * [`refine`]: recurrent mask refinement driven by a confidence cache.
//! * [`data`]: folds, episode sampling, the synthetic shapes generator and
//!   the on-disk dataset layout.
//! * [`train`]: losses, SGD, the episodic loop, checkpoints and the
//!   finite-difference harness.
//! * [`kshot`]: support-pair finetuning and probability fusion.
//! * [`eval`]: IoU accumulators, multi-scale testing and fold
//!   cross-validation.

pub mod autograd;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod kshot;
pub mod model;
pub mod params;
pub mod refine;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Single-precision tensors used for training and evaluation.
pub type Tensor32 = Tensor<f32>;
/// Double-precision tensors used by gradient verification.
pub type Tensor64 = Tensor<f64>;
/// Single-precision parameter store.
pub type Params32 = params::ModelParams<f32>;
/// Double-precision parameter store.
pub type Params64 = params::ModelParams<f64>;
