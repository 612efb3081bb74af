//! Anytime person re-identification at desk scale.
//!
//! A from-scratch implementation of a multi-scenario ReID model: six
//! scenario classification tokens over a small ViT-style backbone, a
//! mixture-of-attribute-experts sublayer with top-k gating, a
//! scenario-aware identity loss with hierarchical dynamic weighting, a
//! synthetic dataset generator, and a six-scenario retrieval evaluation
//! harness with CMC/mAP metrics.
//!
//! The numeric core is generic over the scalar type ([`scalar::Scalar`]):
//! f32 for training, f64 for gradient checking.

pub mod data;
pub mod error;
pub mod scalar;
pub mod scenario;
pub mod tensor;

pub use error::{Error, Result};

/// Training-precision tensor.
pub type Tensor32 = tensor::Tensor<f32>;
/// Gradient-check-precision tensor.
pub type Tensor64 = tensor::Tensor<f64>;
