//! Fixed-point quantization engine for few-shot CNN backbones.
//!
//! The crate implements signed Q(i,f) fixed-point semantics, a small NCHW
//! tensor/operator set with fake-quantized twins, ResNet-style backbones,
//! SGD training (float and quantization-aware), the post-training
//! quantization pipeline, and episodic Nearest-Class-Mean evaluation.
//!
//! # Modules
//!
//! - [`fixedpoint`] -- Q(i,f) formats, rounding, saturation
//! - [`tensor`] -- dense tensors and the operator set
//! - [`backbone`] -- layer graphs, ResNet12 / ResNet-lite builders, forward
//! - [`training`] -- SGD with backprop, straight-through estimator, grad check
//! - [`ptq`] -- post-training quantization pipeline and feature standardization
//! - [`fewshot`] -- episodes, class means, NCM classification, accuracy stats
//! - [`io`] -- weight files, synthetic dataset generator, raw image datasets
//! - [`rng`] -- seeded counter-based PRNG (SplitMix64)

pub mod backbone;
pub mod error;
pub mod fewshot;
pub mod fixedpoint;
pub mod io;
pub mod ptq;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{QfxError, Result};
pub use fixedpoint::QFormat;
pub use tensor::{QuantConfig, Tensor};
