//! Deformable-attention gating for CNNs, built from scratch in f64.
//!
//! The crate provides dense 4-D tensors with reference convolution and
//! sampling kernels, tape-based reverse-mode autodiff, the neural layers
//! needed for a mini-ResNet (standard / depthwise-separable / deformable
//! convolutions, four normalizations, activations, pooling, linear head),
//! the deformable attention gate and its design-evolution variants, model
//! building with configurable gate placement, structural cost counting,
//! gradCAM saliency with the salient-feature-detection score, and an SGD
//! training loop with dataset ingestion and binary checkpoints.

pub mod error;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
