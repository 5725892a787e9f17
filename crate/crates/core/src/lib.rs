//! Optimal Gaussian diffusion priors and clean-manifold guidance for joint
//! multi-agent trajectory generation on synthetic Gaussian-mixture scenes.

pub mod denoiser;
pub mod error;
pub mod evaluate;
pub mod guidance;
pub mod harness;
pub mod latent;
pub mod persistence;
pub mod prior;
pub mod rng;
pub mod sampler;
pub mod scenario;
pub mod schedule;
pub mod stats;

pub use error::{Error, Result};
