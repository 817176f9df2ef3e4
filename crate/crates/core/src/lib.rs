//! Covariance estimation from partitioned compressive measurements, with
//! projected gradient descent whose gradients are denoised by a diffusion model.

pub mod cli;
pub mod config;
pub mod container;
pub mod cube;
pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod objective;
pub mod optimizer;
pub mod pipeline;
pub mod rng;
pub mod sensing;

pub use error::{Error, Result};
