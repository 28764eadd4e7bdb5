//! Wavelet-guided adversarial denoising at desk scale.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod filters;
pub mod losses;
pub mod fsio;
pub mod generator;
pub mod data;
pub mod discriminator;
pub mod eval;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod quality;
pub mod registry;
pub mod report;
pub mod tensor;
pub mod train;
pub mod wavelet;

pub use error::{Error, Result};
pub use tensor::Tensor;
