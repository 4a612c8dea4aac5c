//! Selective state space models scanned over images in four directions,
//! assembled into a hierarchical U-shaped restoration network, with the
//! tensor engine, accounting and deblurring harness around them.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the element type for the common cases.

pub mod arch;
pub mod error;
pub mod harness;
pub mod nn;
pub mod scalar;
pub mod ss2d;
pub mod ssm;
pub mod tensor;

pub use error::{Error, Result, TensorError};
pub use scalar::{DType, Scalar};

pub type TensorF32 = tensor::Tensor<f32>;
pub type TensorF64 = tensor::Tensor<f64>;
pub type GraphF32 = tensor::Graph<f32>;
pub type GraphF64 = tensor::Graph<f64>;
pub type SelectiveParamsF32 = ssm::SelectiveParams<f32>;
pub type SelectiveParamsF64 = ssm::SelectiveParams<f64>;
pub type SerpentF32 = arch::SerpentModel<f32>;
pub type SerpentF64 = arch::SerpentModel<f64>;
