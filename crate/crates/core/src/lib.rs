//! Statistical refinement of image denoisers.
//!
//! A refiner network is trained from noisy images alone so that its outputs
//! stay close to a given base denoiser while satisfying a learned
//! noise-consistency criterion built from a small injected auxiliary signal.

pub mod audit;
pub mod aux;
pub mod config;
pub mod data;
pub mod denoise;
pub mod error;
pub mod metrics;
pub mod nets;
pub mod oracles;
pub mod parallel;
pub mod pipeline;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
