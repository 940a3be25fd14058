//! Entropy-guided attention fixing for small vision transformers.
//!
//! The crate trains or loads a compact ViT, streams per-weight attention
//! histograms over a calibration subset, derives entropy, mean and KL maps,
//! and freezes the lowest-entropy attention weights to their means under
//! optional low-bit fake quantization. FLOPs accounting reports what the
//! frozen weights would save.
//!
//! Model math is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below name the usual instantiations.

mod binio;
pub mod complexity;
pub mod data;
pub mod error;
pub mod fixing;
pub mod quant;
pub mod rng;
pub mod scalar;
pub mod stats;
pub mod tensor;
pub mod vit;

pub use error::{Error, Magic, Result};
pub use rng::RngState;
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Vit32 = vit::Vit<f32>;
pub type Vit64 = vit::Vit<f64>;
pub type Params32 = vit::Parameters<f32>;
pub type Params64 = vit::Parameters<f64>;
pub type QuantizedVit32 = quant::QuantizedVit<f32>;
