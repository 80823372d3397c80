//! Cross-view latent video world model whose latent space is shaped by an
//! auxiliary 4D Gaussian-splatting reconstruction task.
//!
//! * [`synthworld`]: procedural multi-view scenes with exact ground truth.
//! * [`splatcore`]: differentiable 4D Gaussian-splatting renderer.
//! * [`stormvae`]: VAE with an image decoder and a Gaussian decoder.
//! * [`cvdiffusion`]: rectified-flow spatial/temporal/cross-view transformer.
//! * [`harness`]: configuration, training, generation, reconstruction, metrics.

pub mod cvdiffusion;
pub mod error;
pub mod harness;
pub mod nn;
pub mod splatcore;
pub mod stormvae;
pub mod synthworld;

pub use error::{Error, Result};
