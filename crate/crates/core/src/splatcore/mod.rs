//! Differentiable 4D Gaussian splatting.
//!
//! Pixel-aligned raw channels decode into 3D Gaussians placed along camera
//! rays; Gaussians move with constant velocity and are rasterized with EWA
//! splatting into RGB, depth and alpha. Everything runs in `f64` on the CPU.
//! [`rasterize_backward`] is the analytic adjoint of [`rasterize`], and
//! [`oracle_render`] is a brute-force reference for testing.
//!
//! Raw channel layout per pixel (anisotropic mode):
//!
//! | channels | meaning | activation |
//! |---|---|---|
//! | 0 | ray depth | `near + (far − near)·σ(x)` |
//! | 1..5 | rotation quaternion `w,x,y,z` | normalized |
//! | 5..8 | per-axis scale | `exp`, clamped |
//! | 8 | opacity | `σ` |
//! | 9..12 | color | `σ` |
//!
//! Velocity lives in a separate 3-channel head. In isotropic mode channel 5
//! is a shared scale, opacity is 6, color 7..10, and 10..12 are ignored.

pub mod gaussian;
pub mod oracle;
pub mod pipeline;
pub mod render;

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

pub use gaussian::{
    decode_raw, decode_raw_backward, transport, GaussianGrad, GaussianPrimitive, GaussianSet, GridGrad,
    PixelGaussianGrid, GRID_CHANNELS, RAW_CHANNELS, VELOCITY_CHANNELS,
};
pub use oracle::oracle_render;
pub use pipeline::{render_grids, render_grids_backward, SplatRenderOp, RENDER_CHANNELS};
pub use render::{rasterize, rasterize_backward, RenderGrad, RenderOutput, RenderStats};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScaleMode {
    #[default]
    Anisotropic,
    Isotropic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplatConfig {
    pub near: f64,
    pub far: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub scale_mode: ScaleMode,
    pub alpha_max: f64,
    pub near_cull: f64,
    pub alpha_eps: f64,
    /// Screen covariances above this condition number are skipped.
    pub max_condition: f64,
    /// Added to the screen covariance diagonal, in pixels².
    pub dilation: f64,
    /// Per-pixel opacity below which the tiled rasterizer may skip a primitive.
    pub footprint_cutoff: f64,
}

impl Default for SplatConfig {
    fn default() -> Self {
        Self {
            near: 0.5,
            far: 60.0,
            scale_min: 1e-3,
            scale_max: 50.0,
            scale_mode: ScaleMode::Anisotropic,
            alpha_max: 0.999,
            near_cull: 0.1,
            alpha_eps: 1e-6,
            max_condition: 1e8,
            dilation: 0.0,
            footprint_cutoff: 1e-15,
        }
    }
}

pub(crate) static DEGENERATE_SKIPS: AtomicU64 = AtomicU64::new(0);

/// Total primitives skipped for degenerate screen covariance since start-up.
pub fn degenerate_count() -> u64 {
    DEGENERATE_SKIPS.load(Ordering::Relaxed)
}

/// `rgb + (1 − alpha)·sky`, clamped to `[0, 1]`.
pub fn composite_sky(out: &RenderOutput, sky: [f64; 3]) -> Vec<f64> {
    out.rgb
        .chunks_exact(3)
        .zip(&out.alpha)
        .flat_map(|(c, &a)| (0..3).map(move |i| (c[i] + (1.0 - a) * sky[i]).clamp(0.0, 1.0)))
        .collect()
}

/// `gain·rgb + bias`, clamped to `[0, 1]`.
pub fn apply_exposure(rgb: &[f64], gain: f64, bias: f64) -> Vec<f64> {
    rgb.iter().map(|&c| (gain * c + bias).clamp(0.0, 1.0)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_pixel(rgb: [f64; 3], alpha: f64) -> RenderOutput {
        RenderOutput {
            height: 1,
            width: 1,
            rgb: rgb.to_vec(),
            depth: vec![0.0],
            alpha: vec![alpha],
            stats: RenderStats::default(),
        }
    }

    #[test]
    fn sky_blend_cases() {
        let sky = [0.2, 0.4, 0.6];
        assert_eq!(composite_sky(&one_pixel([0.0; 3], 0.0), sky), sky.to_vec());
        assert_eq!(composite_sky(&one_pixel([0.1, 0.2, 0.3], 1.0), sky), vec![0.1, 0.2, 0.3]);
        let half = composite_sky(&one_pixel([0.3; 3], 0.5), [1.0; 3]);
        assert!(half.iter().all(|&c| (c - 0.8).abs() < 1e-15));
    }

    #[test]
    fn exposure_cases() {
        let rgb = [0.1, 0.6, 0.9];
        assert_eq!(apply_exposure(&rgb, 1.0, 0.0), rgb.to_vec());
        assert_eq!(apply_exposure(&rgb, 0.0, 0.5), vec![0.5; 3]);
        assert_eq!(apply_exposure(&[0.6], 2.0, 0.0), vec![1.0]);
    }
}
