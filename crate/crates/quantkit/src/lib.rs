//! Weight-only 4-bit post-training quantization with per-channel activation
//! smoothing, evaluated on a miniature decoder model.
//!
//! The pipeline: generate or load a model bundle and calibration samples,
//! collect per-channel activation maxima, pick a smoothing strength by grid
//! search over the whole-model quantization loss, rescale activations into
//! weights (mathematically equivalent), then group-quantize every linear
//! weight to 4 bits.
//!
//! Kernels are generic over the [`Scalar`] element type; the concrete `f32`
//! aliases below match the on-disk container dtype.

pub mod container;
pub mod error;
pub mod fixture;
pub mod model;
pub mod quant;
pub mod scalar;
pub mod search;
pub mod smoothing;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// `f32` tensor, the container dtype.
pub type Tensor32 = tensor::Tensor<f32>;
/// `f64` tensor for double-precision experiments.
pub type Tensor64 = tensor::Tensor<f64>;
/// `f32` quantized linear weight.
pub type QuantizedLinear32 = quant::QuantizedLinear<f32>;
/// `f32` decoder model.
pub type MiniModel32 = model::MiniModel<f32>;
/// `f32` quantized decoder model.
pub type QuantizedModel32 = model::QuantizedModel<f32>;
/// `f32` activation statistics.
pub type ActStats32 = model::ActStats<f32>;
