//! Single-image dehazing toolkit.
//!
//! Scattering-model physics ([`scattering`]), image I/O and augmentation
//! ([`imagecore`]), a small differentiable CNN substrate ([`nn`]), the
//! FastNet / DualFastNet model family ([`models`]), losses, training,
//! PSNR/SSIM metrics, synthetic dataset generation and a throughput bench.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below name the concrete instantiations.

pub mod bench;
pub mod datasets;
pub mod error;
pub mod imagecore;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod scalar;
pub mod scattering;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Image32 = imagecore::Image<f32>;
pub type Image64 = imagecore::Image<f64>;
pub type Tensor32 = nn::Tensor4<f32>;
pub type Tensor64 = nn::Tensor4<f64>;
pub type Model32 = models::ModelGraph<f32>;
pub type Model64 = models::ModelGraph<f64>;
