//! Constant-curvature gyrovector geometry and the models built on it: a
//! stereographic-projection VAE with wrapped-normal latents and a gyroplane
//! decoder head, and Deep SVDD on the Poincaré ball, plus the tooling to
//! score reconstruction-based anomalies.

pub mod autodiff;
pub mod checkpoint;
pub mod distributions;
pub mod error;
pub mod geometry;
pub mod gyroplane;
pub mod harness;
pub mod nn;
pub mod rng;
pub mod spvae;
pub mod svdd;

pub use error::{Error, Result};
