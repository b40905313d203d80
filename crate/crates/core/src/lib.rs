//! Part-based shape modelling: per-category statistical shape models, a
//! Gaussian label codebook and a set-valued latent diffusion model over
//! the resulting part latents.

pub mod applications;
pub mod autodiff;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod geometry;
pub mod metrics;
pub mod ply;
pub mod scalar;
pub mod semantics;
pub mod ssm;
pub mod synthetic;

pub use error::{Error, Result};
pub use scalar::Real;

/// Double-precision point.
pub type Point = geometry::Point3<f64>;
/// Double-precision point cloud.
pub type Cloud = geometry::PointCloud<f64>;
/// Single-precision tensor used by the network.
pub type Tensor32 = autodiff::Tensor<f32>;
/// Double-precision tensor used by gradient oracles.
pub type Tensor64 = autodiff::Tensor<f64>;
