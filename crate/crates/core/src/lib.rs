//! Desk-scale laboratory for preference fine-tuning of conditional
//! denoising diffusion models.
//!
//! The numeric core ([`diffcore`], [`schedule`], [`denoiser`], [`losses`])
//! is generic over a [`Scalar`]; the experiment layers ([`toyworld`],
//! [`variancelab`], [`trainer`]) work in `f64`. The aliases at the crate
//! root name the `f64` instantiations used throughout.

pub mod checks;
pub mod denoiser;
pub mod diffcore;
pub mod error;
pub mod losses;
pub mod rng;
pub mod sampling;
pub mod scalar;
pub mod schedule;
pub mod stats;
pub mod toyworld;
pub mod trainer;
pub mod variancelab;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor = diffcore::Tensor<f64>;
pub type Graph = diffcore::Graph<f64>;
pub type NoiseSchedule = schedule::NoiseSchedule<f64>;
pub type DenoiserParams = denoiser::DenoiserParams<f64>;
pub type FrozenDenoiser = denoiser::FrozenDenoiser<f64>;
