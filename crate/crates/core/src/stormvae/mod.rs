//! Dual-decoder VAE.
//!
//! A convolutional encoder maps each image to a latent grid. Two decoders
//! read the latents. The image decoder reconstructs pixels. The Gaussian
//! decoder is a transformer over context-frame latents that emits
//! pixel-aligned Gaussians plus sky and exposure parameters. The Gaussians
//! are rendered at target times and supervised with images and depth.

pub mod autoencoder;
pub mod gs_decoder;
pub mod loss;
pub mod model;

use candle_core::Tensor;
use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use autoencoder::{Encoder, ImageDecoder};
pub use gs_decoder::{GsDecoder, GsDecoderOutput};
pub use loss::{kl_divergence, loss_storm, loss_vae, perceptual_proxy, scalar, total_loss, LossWeights, StormTerms, VaeTerms};
pub use model::{clip_frames, render_targets, StepLosses, StormVae, Target, TargetRender, TrainingSample};

use crate::error::{Error, Result};
use crate::splatcore::SplatConfig;
use crate::synthworld::CameraModel;

/// Log-variance bounds applied to the posterior.
pub const LOGVAR_MIN: f64 = -30.0;
pub const LOGVAR_MAX: f64 = 20.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VaeConfig {
    pub latent_channels: usize,
    /// Spatial downsampling factor `f`.
    pub downsample: usize,
    pub base_channels: usize,
    pub gs_layers: usize,
    pub gs_width: usize,
    pub gs_heads: usize,
    pub patch: usize,
    pub max_views: usize,
    /// Largest latent side supported by the learned positional table.
    pub max_latent_side: usize,
    pub n_targets: usize,
    pub splat: SplatConfig,
    pub weights: LossWeights,
    /// Initial raw depth bias of the Gaussian head.
    pub depth_bias: f64,
    /// Initial raw (log) scale bias of the Gaussian head.
    pub scale_bias: f64,
    pub opacity_bias: f64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            latent_channels: 8,
            downsample: 4,
            base_channels: 64,
            gs_layers: 6,
            gs_width: 256,
            gs_heads: 8,
            patch: 2,
            max_views: 8,
            max_latent_side: 16,
            n_targets: 3,
            splat: SplatConfig::default(),
            weights: LossWeights::default(),
            depth_bias: -1.6,
            scale_bias: -1.5,
            opacity_bias: 1.0,
        }
    }
}

impl VaeConfig {
    pub fn validate(&self) -> Result<()> {
        if ![4, 8].contains(&self.downsample) {
            return Err(Error::config("downsample factor must be 4 or 8"));
        }
        if ![4, 8, 16].contains(&self.latent_channels) {
            return Err(Error::config("latent channels must be 4, 8 or 16"));
        }
        if self.patch == 0 || self.gs_heads == 0 || self.gs_width % self.gs_heads != 0 {
            return Err(Error::config("gaussian decoder width must be divisible by its heads"));
        }
        if self.base_channels == 0 || self.base_channels % 2 != 0 {
            return Err(Error::config("base channels must be even and positive"));
        }
        Ok(())
    }
}

/// Posterior mean and clamped log-variance, `[N, C, h, w]`.
#[derive(Debug, Clone)]
pub struct PosteriorStats {
    pub mean: Tensor,
    pub logvar: Tensor,
}

/// Latent video: values `[T, V, C, h, w]` with per-view validity.
#[derive(Debug, Clone)]
pub struct LatentGrid {
    pub values: Tensor,
    pub view_valid: Vec<bool>,
    pub timestamps: Vec<f64>,
    /// Indexed `t * V + v`.
    pub cameras: Vec<CameraModel>,
    pub downsample: usize,
}

impl LatentGrid {
    pub fn dims(&self) -> Result<(usize, usize, usize, usize, usize)> {
        Ok(self.values.dims5()?)
    }
}

/// `z = mean + exp(logvar / 2)·η` with seeded standard-normal `η`.
pub fn reparameterize(stats: &PosteriorStats, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let eta = crate::nn::randn(stats.mean.shape().clone(), rng)?.to_dtype(stats.mean.dtype())?;
    reparameterize_with(stats, &eta)
}

/// `z = mean + exp(logvar / 2)·η` for a given `η`.
pub fn reparameterize_with(stats: &PosteriorStats, eta: &Tensor) -> Result<Tensor> {
    let std = (&stats.logvar * 0.5)?.exp()?;
    Ok((&stats.mean + std.mul(eta)?)?)
}

/// Four context frames (first, last and two evenly spaced between) and
/// `n_targets` target frames drawn uniformly without replacement.
pub fn select_context(clip_len: usize, n_targets: usize, rng: &mut ChaCha8Rng) -> Result<(Vec<usize>, Vec<usize>)> {
    if clip_len < 4 {
        return Err(Error::config(format!("clip of {clip_len} frames is too short for 4 context frames")));
    }
    let ctx = (0..4)
        .map(|i| ((i * (clip_len - 1)) as f64 / 3.0).round() as usize)
        .collect();
    let mut targets = sample(rng, clip_len, n_targets.min(clip_len)).into_vec();
    targets.sort_unstable();
    Ok((ctx, targets))
}
