//! Gaussian primitives, pixel-aligned decoding and constant-velocity transport.

use nalgebra::Vector3;

use super::{ScaleMode, SplatConfig};
use crate::error::{Error, Result};
use crate::synthworld::CameraModel;

/// Raw appearance/geometry channels per pixel.
pub const RAW_CHANNELS: usize = 12;
/// Velocity channels per pixel.
pub const VELOCITY_CHANNELS: usize = 3;
/// Raw plus velocity, the per-pixel width of a decoder head.
pub const GRID_CHANNELS: usize = RAW_CHANNELS + VELOCITY_CHANNELS;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianPrimitive {
    pub mean: [f64; 3],
    /// Unit quaternion `[w, x, y, z]`.
    pub rotation: [f64; 4],
    pub scale: [f64; 3],
    pub opacity: f64,
    pub color: [f64; 3],
    pub velocity: [f64; 3],
    pub source_time: f64,
    /// Center at `anchor_time`; transport always starts from here so that
    /// repeated transports compose exactly.
    pub anchor_mean: [f64; 3],
    pub anchor_time: f64,
}

impl GaussianPrimitive {
    /// Primitive anchored at its own center and time.
    pub fn new(
        mean: [f64; 3],
        rotation: [f64; 4],
        scale: [f64; 3],
        opacity: f64,
        color: [f64; 3],
        velocity: [f64; 3],
        source_time: f64,
    ) -> Self {
        Self {
            mean,
            rotation,
            scale,
            opacity,
            color,
            velocity,
            source_time,
            anchor_mean: mean,
            anchor_time: source_time,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.mean
            .iter()
            .chain(&self.rotation)
            .chain(&self.scale)
            .chain(&self.color)
            .chain(&self.velocity)
            .chain(&self.anchor_mean)
            .chain([&self.opacity, &self.source_time, &self.anchor_time])
            .all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GaussianSet {
    pub gaussians: Vec<GaussianPrimitive>,
}

impl GaussianSet {
    pub fn new(gaussians: Vec<GaussianPrimitive>) -> Self {
        Self { gaussians }
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    /// Concatenation of several sets.
    pub fn union<'a>(sets: impl IntoIterator<Item = &'a GaussianSet>) -> Self {
        Self {
            gaussians: sets.into_iter().flat_map(|s| s.gaussians.iter().copied()).collect(),
        }
    }
}

/// Per-pixel raw decoder output for one source view.
///
/// `raw` is `H×W×12` and `velocity` is `H×W×3`, both row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelGaussianGrid {
    pub raw: Vec<f64>,
    pub velocity: Vec<f64>,
    pub camera: CameraModel,
    pub source_time: f64,
}

impl PixelGaussianGrid {
    pub fn zeros(camera: CameraModel, source_time: f64) -> Self {
        let n = camera.height * camera.width;
        Self {
            raw: vec![0.0; n * RAW_CHANNELS],
            velocity: vec![0.0; n * VELOCITY_CHANNELS],
            camera,
            source_time,
        }
    }

    /// Builds a grid from interleaved `H×W×15` channels (raw then velocity).
    pub fn from_interleaved(data: &[f64], camera: CameraModel, source_time: f64) -> Result<Self> {
        let n = camera.height * camera.width;
        if data.len() != n * GRID_CHANNELS {
            return Err(Error::shape(format!(
                "grid data has {} values, expected {}",
                data.len(),
                n * GRID_CHANNELS
            )));
        }
        let mut g = Self::zeros(camera, source_time);
        for (p, px) in data.chunks_exact(GRID_CHANNELS).enumerate() {
            g.raw[p * RAW_CHANNELS..(p + 1) * RAW_CHANNELS].copy_from_slice(&px[..RAW_CHANNELS]);
            g.velocity[p * VELOCITY_CHANNELS..(p + 1) * VELOCITY_CHANNELS].copy_from_slice(&px[RAW_CHANNELS..]);
        }
        Ok(g)
    }

    pub fn pixels(&self) -> usize {
        self.camera.height * self.camera.width
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.pixels();
        if self.raw.len() != n * RAW_CHANNELS || self.velocity.len() != n * VELOCITY_CHANNELS {
            return Err(Error::shape("grid size does not match its camera"));
        }
        Ok(())
    }
}

/// Gradient of a scalar loss with respect to one decoded primitive.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GaussianGrad {
    pub mean: [f64; 3],
    /// With respect to the unit quaternion components.
    pub rotation: [f64; 4],
    pub scale: [f64; 3],
    pub opacity: f64,
    pub color: [f64; 3],
    pub velocity: [f64; 3],
}

/// Gradient with respect to a grid's raw and velocity channels.
#[derive(Debug, Clone, PartialEq)]
pub struct GridGrad {
    pub raw: Vec<f64>,
    pub velocity: Vec<f64>,
}

impl GridGrad {
    /// Interleaves back into `H×W×15`.
    pub fn interleaved(&self) -> Vec<f64> {
        let n = self.raw.len() / RAW_CHANNELS;
        let mut out = Vec::with_capacity(n * GRID_CHANNELS);
        for p in 0..n {
            out.extend_from_slice(&self.raw[p * RAW_CHANNELS..(p + 1) * RAW_CHANNELS]);
            out.extend_from_slice(&self.velocity[p * VELOCITY_CHANNELS..(p + 1) * VELOCITY_CHANNELS]);
        }
        out
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Channel offsets of one raw pixel: (depth, quat, scale, scale count, opacity, color).
fn layout(mode: ScaleMode) -> (usize, usize, usize, usize, usize, usize) {
    match mode {
        ScaleMode::Anisotropic => (0, 1, 5, 3, 8, 9),
        ScaleMode::Isotropic => (0, 1, 5, 1, 6, 7),
    }
}

/// Unit ray through the center of pixel `p` (row-major index).
fn pixel_ray(camera: &CameraModel, p: usize) -> Vector3<f64> {
    let (row, col) = (p / camera.width, p % camera.width);
    camera.ray_direction(col as f64, row as f64)
}

/// One Gaussian per pixel, placed along the pixel ray at the decoded depth.
pub fn decode_raw(grid: &PixelGaussianGrid, cfg: &SplatConfig) -> Result<GaussianSet> {
    grid.validate()?;
    let (o_d, o_q, o_s, n_s, o_o, o_c) = layout(cfg.scale_mode);
    let center = grid.camera.center();
    let mut out = Vec::with_capacity(grid.pixels());
    for p in 0..grid.pixels() {
        let raw = &grid.raw[p * RAW_CHANNELS..(p + 1) * RAW_CHANNELS];
        let vel = &grid.velocity[p * VELOCITY_CHANNELS..(p + 1) * VELOCITY_CHANNELS];
        if let Some(c) = raw.iter().chain(vel).position(|v| !v.is_finite()) {
            return Err(Error::Decode {
                pixel: p,
                reason: format!("channel {c} is not finite"),
            });
        }
        let d = cfg.near + (cfg.far - cfg.near) * sigmoid(raw[o_d]);
        let mean = center + pixel_ray(&grid.camera, p) * d;
        let q = &raw[o_q..o_q + 4];
        let qn = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
        if qn < 1e-12 {
            return Err(Error::Decode {
                pixel: p,
                reason: "zero-norm quaternion".into(),
            });
        }
        let s = |i: usize| raw[o_s + i.min(n_s - 1)].exp().clamp(cfg.scale_min, cfg.scale_max);
        out.push(GaussianPrimitive::new(
            [mean.x, mean.y, mean.z],
            [q[0] / qn, q[1] / qn, q[2] / qn, q[3] / qn],
            [s(0), s(1), s(2)],
            sigmoid(raw[o_o]),
            [sigmoid(raw[o_c]), sigmoid(raw[o_c + 1]), sigmoid(raw[o_c + 2])],
            [vel[0], vel[1], vel[2]],
            grid.source_time,
        ));
    }
    Ok(GaussianSet::new(out))
}

/// Chains per-primitive gradients (after transport) back to raw grid channels.
///
/// `grads` are with respect to the transported primitives; `t_prime` is the
/// time they were transported to.
pub fn decode_raw_backward(
    grid: &PixelGaussianGrid,
    cfg: &SplatConfig,
    grads: &[GaussianGrad],
    t_prime: f64,
) -> Result<GridGrad> {
    grid.validate()?;
    if grads.len() != grid.pixels() {
        return Err(Error::shape("one gradient per grid pixel expected"));
    }
    let (o_d, o_q, o_s, n_s, o_o, o_c) = layout(cfg.scale_mode);
    let dt = t_prime - grid.source_time;
    let mut raw_g = vec![0.0; grid.raw.len()];
    let mut vel_g = vec![0.0; grid.velocity.len()];
    for (p, g) in grads.iter().enumerate() {
        let raw = &grid.raw[p * RAW_CHANNELS..(p + 1) * RAW_CHANNELS];
        let rg = &mut raw_g[p * RAW_CHANNELS..(p + 1) * RAW_CHANNELS];

        let ray = pixel_ray(&grid.camera, p);
        let g_d = g.mean[0] * ray.x + g.mean[1] * ray.y + g.mean[2] * ray.z;
        let sd = sigmoid(raw[o_d]);
        rg[o_d] = g_d * (cfg.far - cfg.near) * sd * (1.0 - sd);

        let q = &raw[o_q..o_q + 4];
        let qn = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
        let u = [q[0] / qn, q[1] / qn, q[2] / qn, q[3] / qn];
        let dot: f64 = (0..4).map(|i| u[i] * g.rotation[i]).sum();
        for i in 0..4 {
            rg[o_q + i] = (g.rotation[i] - u[i] * dot) / qn;
        }

        for i in 0..3 {
            let k = i.min(n_s - 1);
            let e = raw[o_s + k].exp();
            if e > cfg.scale_min && e < cfg.scale_max {
                rg[o_s + k] += g.scale[i] * e;
            }
        }

        let so = sigmoid(raw[o_o]);
        rg[o_o] = g.opacity * so * (1.0 - so);
        for i in 0..3 {
            let sc = sigmoid(raw[o_c + i]);
            rg[o_c + i] = g.color[i] * sc * (1.0 - sc);
        }
        for i in 0..3 {
            vel_g[p * VELOCITY_CHANNELS + i] = g.mean[i] * dt;
        }
        for i in 0..3 {
            vel_g[p * VELOCITY_CHANNELS + i] += g.velocity[i];
        }
    }
    Ok(GridGrad { raw: raw_g, velocity: vel_g })
}

/// Moves every primitive to time `t_prime` along its velocity.
pub fn transport(set: &GaussianSet, t_prime: f64) -> GaussianSet {
    GaussianSet::new(
        set.gaussians
            .iter()
            .map(|g| {
                let dt = t_prime - g.anchor_time;
                GaussianPrimitive {
                    mean: [
                        g.anchor_mean[0] + g.velocity[0] * dt,
                        g.anchor_mean[1] + g.velocity[1] * dt,
                        g.anchor_mean[2] + g.velocity[2] * dt,
                    ],
                    source_time: t_prime,
                    ..*g
                }
            })
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cam() -> CameraModel {
        CameraModel::identity(32.0, 32.0, 32.0, 32.0, 64, 64)
    }

    #[test]
    fn central_pixel_default_depth() {
        let mut grid = PixelGaussianGrid::zeros(cam(), 0.0);
        for p in 0..grid.pixels() {
            grid.raw[p * RAW_CHANNELS + 1] = 1.0;
        }
        let set = decode_raw(&grid, &SplatConfig::default()).unwrap();
        let g = set.gaussians[32 * 64 + 32];
        assert!((g.mean[0]).abs() < 1e-12 && (g.mean[1]).abs() < 1e-12);
        assert!((g.mean[2] - 30.25).abs() < 1e-12);
        assert_eq!(g.rotation, [1.0, 0.0, 0.0, 0.0]);
        assert_eq!(g.opacity, 0.5);
    }

    #[test]
    fn opacity_endpoints() {
        assert!(sigmoid(-20.0) < 1e-8);
        assert_eq!(sigmoid(0.0), 0.5);
    }

    #[test]
    fn non_finite_raw_names_pixel() {
        let mut grid = PixelGaussianGrid::zeros(cam(), 0.0);
        grid.raw.iter_mut().skip(1).step_by(RAW_CHANNELS).for_each(|v| *v = 1.0);
        grid.raw[5 * RAW_CHANNELS + 9] = f64::NAN;
        match decode_raw(&grid, &SplatConfig::default()) {
            Err(Error::Decode { pixel, .. }) => assert_eq!(pixel, 5),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn scale_is_clamped() {
        let mut grid = PixelGaussianGrid::zeros(CameraModel::identity(1.0, 1.0, 0.0, 0.0, 1, 1), 0.0);
        grid.raw[1] = 1.0;
        grid.raw[5] = 100.0;
        grid.raw[6] = -100.0;
        let g = decode_raw(&grid, &SplatConfig::default()).unwrap().gaussians[0];
        assert_eq!(g.scale, [50.0, 1e-3, 1.0]);
    }

    #[test]
    fn isotropic_mode_shares_scale() {
        let cfg = SplatConfig {
            scale_mode: ScaleMode::Isotropic,
            ..Default::default()
        };
        let mut grid = PixelGaussianGrid::zeros(CameraModel::identity(1.0, 1.0, 0.0, 0.0, 1, 1), 0.0);
        grid.raw[1] = 1.0;
        grid.raw[5] = 0.5;
        grid.raw[6] = 3.0;
        let g = decode_raw(&grid, &cfg).unwrap().gaussians[0];
        assert_eq!(g.scale, [0.5f64.exp(); 3]);
        assert_eq!(g.opacity, sigmoid(3.0));
    }

    #[test]
    fn transport_moves_linearly() {
        let g = GaussianPrimitive::new([0.0, 0.0, 5.0], [1.0, 0.0, 0.0, 0.0], [1.0; 3], 0.5, [0.5; 3], [1.0, 0.0, 0.0], 0.0);
        let out = transport(&GaussianSet::new(vec![g]), 2.0).gaussians[0];
        assert_eq!(out.mean, [2.0, 0.0, 5.0]);
        assert_eq!(out.source_time, 2.0);
        assert_eq!(out.velocity, g.velocity);
    }
}
