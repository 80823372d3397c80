//! Tiled EWA rasterizer with an analytic backward pass.

use std::sync::atomic::Ordering;

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};

use super::gaussian::{GaussianGrad, GaussianPrimitive, GaussianSet};
use super::{SplatConfig, DEGENERATE_SKIPS};
use crate::error::{Error, Result};
use crate::synthworld::camera::quat_to_matrix;
use crate::synthworld::CameraModel;

const TILE: usize = 8;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RenderStats {
    /// Behind the near plane.
    pub culled: usize,
    /// Screen covariance singular or too badly conditioned.
    pub degenerate: usize,
    pub drawn: usize,
}

/// Composited buffers, all row-major. `rgb` is `H×W×3`.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub height: usize,
    pub width: usize,
    pub rgb: Vec<f64>,
    pub depth: Vec<f64>,
    pub alpha: Vec<f64>,
    pub stats: RenderStats,
}

impl RenderOutput {
    pub fn zeros(height: usize, width: usize) -> Self {
        let n = height * width;
        Self {
            height,
            width,
            rgb: vec![0.0; n * 3],
            depth: vec![0.0; n],
            alpha: vec![0.0; n],
            stats: RenderStats::default(),
        }
    }
}

/// Upstream gradients for the three output buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderGrad {
    pub rgb: Vec<f64>,
    pub depth: Vec<f64>,
    pub alpha: Vec<f64>,
}

impl RenderGrad {
    pub fn zeros(height: usize, width: usize) -> Self {
        let n = height * width;
        Self {
            rgb: vec![0.0; n * 3],
            depth: vec![0.0; n],
            alpha: vec![0.0; n],
        }
    }
}

/// A primitive projected into one camera.
#[derive(Debug, Clone)]
struct Splat {
    index: usize,
    /// Camera-frame position of the center.
    cam: Vector3<f64>,
    mean2: Vector2<f64>,
    /// Inverse screen covariance.
    conic: Matrix2<f64>,
    /// `J W` of the EWA linearization.
    m: Matrix2x3<f64>,
    sigma3: Matrix3<f64>,
    rot: Matrix3<f64>,
    dist: f64,
    /// Inclusive pixel bounds `(col0, col1, row0, row1)`; `None` when the
    /// footprint misses the image.
    bbox: Option<(usize, usize, usize, usize)>,
}

enum Projection {
    Splat(Box<Splat>),
    Culled,
    Degenerate,
}

/// Eigenvalues `(min, max)` of a symmetric 2×2 matrix.
fn sym2_eigen(a: f64, b: f64, c: f64) -> (f64, f64) {
    let mid = 0.5 * (a + c);
    let r = (0.25 * (a - c) * (a - c) + b * b).sqrt();
    (mid - r, mid + r)
}

fn project(
    index: usize,
    g: &GaussianPrimitive,
    camera: &CameraModel,
    w: &Matrix3<f64>,
    center: &Vector3<f64>,
    cfg: &SplatConfig,
) -> Projection {
    let mu = Vector3::from(g.mean);
    let p = w * mu + camera.translation_vec();
    if !(p.z > cfg.near_cull) {
        return Projection::Culled;
    }
    let rot = quat_to_matrix(g.rotation);
    let a = rot * Matrix3::from_diagonal(&Vector3::from(g.scale));
    let sigma3 = a * a.transpose();
    let (fx, fy) = (camera.fx, camera.fy);
    let iz = 1.0 / p.z;
    let j = Matrix2x3::new(fx * iz, 0.0, -fx * p.x * iz * iz, 0.0, fy * iz, -fy * p.y * iz * iz);
    let m = j * w;
    let cov = m * sigma3 * m.transpose() + Matrix2::identity() * cfg.dilation;
    let (ca, cb, cc) = (cov[(0, 0)], 0.5 * (cov[(0, 1)] + cov[(1, 0)]), cov[(1, 1)]);
    let (lmin, lmax) = sym2_eigen(ca, cb, cc);
    let det = ca * cc - cb * cb;
    if !(lmin > 0.0) || !(det > 0.0) || lmax / lmin > cfg.max_condition {
        return Projection::Degenerate;
    }
    let conic = Matrix2::new(cc / det, -cb / det, -cb / det, ca / det);
    let mean2 = Vector2::new(fx * p.x * iz + camera.cx, fy * p.y * iz + camera.cy);

    let bbox = if g.opacity > cfg.footprint_cutoff {
        let r2 = 2.0 * (g.opacity / cfg.footprint_cutoff).ln();
        let (ex, ey) = ((r2 * ca).sqrt(), (r2 * cc).sqrt());
        let (c0, c1) = ((mean2.x - ex).ceil().max(0.0), (mean2.x + ex).floor());
        let (r0, r1) = ((mean2.y - ey).ceil().max(0.0), (mean2.y + ey).floor());
        let (wmax, hmax) = ((camera.width - 1) as f64, (camera.height - 1) as f64);
        (c0 <= c1.min(wmax) && r0 <= r1.min(hmax) && c1 >= 0.0 && r1 >= 0.0)
            .then(|| (c0 as usize, c1.min(wmax) as usize, r0 as usize, r1.min(hmax) as usize))
    } else {
        None
    };

    Projection::Splat(Box::new(Splat {
        index,
        cam: p,
        mean2,
        conic,
        m,
        sigma3,
        rot,
        dist: (mu - center).norm(),
        bbox,
    }))
}

/// Projects, sorts front to back and bins every primitive into tiles.
struct Prepared {
    splats: Vec<Splat>,
    tiles: Vec<Vec<u32>>,
    tiles_x: usize,
    stats: RenderStats,
}

fn prepare(set: &GaussianSet, camera: &CameraModel, cfg: &SplatConfig) -> Result<Prepared> {
    camera.validate()?;
    if let Some(i) = set.gaussians.iter().position(|g| !g.is_finite()) {
        return Err(Error::Invariant(format!("gaussian {i} has non-finite fields")));
    }
    let w = camera.rotation_matrix();
    let center = camera.center();
    let mut stats = RenderStats::default();
    let mut splats = Vec::with_capacity(set.len());
    for (i, g) in set.gaussians.iter().enumerate() {
        match project(i, g, camera, &w, &center, cfg) {
            Projection::Splat(s) => splats.push(*s),
            Projection::Culled => stats.culled += 1,
            Projection::Degenerate => stats.degenerate += 1,
        }
    }
    if stats.degenerate > 0 {
        DEGENERATE_SKIPS.fetch_add(stats.degenerate as u64, Ordering::Relaxed);
    }
    stats.drawn = splats.len();
    splats.sort_by(|a, b| a.cam.z.total_cmp(&b.cam.z).then(a.index.cmp(&b.index)));

    let tiles_x = camera.width.div_ceil(TILE);
    let tiles_y = camera.height.div_ceil(TILE);
    let mut tiles = vec![Vec::new(); tiles_x * tiles_y];
    for (k, s) in splats.iter().enumerate() {
        if let Some((c0, c1, r0, r1)) = s.bbox {
            for ty in r0 / TILE..=r1 / TILE {
                for tx in c0 / TILE..=c1 / TILE {
                    tiles[ty * tiles_x + tx].push(k as u32);
                }
            }
        }
    }
    Ok(Prepared {
        splats,
        tiles,
        tiles_x,
        stats,
    })
}

/// Per-pixel opacity of a splat: `(alpha, exp term, clamped, offset)`.
#[inline]
fn splat_alpha(s: &Splat, opacity: f64, col: usize, row: usize, cfg: &SplatConfig) -> Option<(f64, f64, bool, Vector2<f64>)> {
    let (c0, c1, r0, r1) = s.bbox?;
    if col < c0 || col > c1 || row < r0 || row > r1 {
        return None;
    }
    let d = Vector2::new(col as f64 - s.mean2.x, row as f64 - s.mean2.y);
    let q = d.dot(&(s.conic * d));
    let e = (-0.5 * q).exp();
    let raw = opacity * e;
    Some(if raw > cfg.alpha_max { (cfg.alpha_max, e, true, d) } else { (raw, e, false, d) })
}

/// Renders RGB, alpha-normalized depth and accumulated alpha.
pub fn rasterize(set: &GaussianSet, camera: &CameraModel, cfg: &SplatConfig) -> Result<RenderOutput> {
    let prep = prepare(set, camera, cfg)?;
    let (h, w) = (camera.height, camera.width);
    let mut out = RenderOutput::zeros(h, w);
    out.stats = prep.stats;
    for row in 0..h {
        for col in 0..w {
            let list = &prep.tiles[(row / TILE) * prep.tiles_x + col / TILE];
            let (mut t, mut a, mut dn) = (1.0, 0.0, 0.0);
            let mut c = [0.0; 3];
            for &k in list {
                let s = &prep.splats[k as usize];
                let g = &set.gaussians[s.index];
                let Some((alpha, ..)) = splat_alpha(s, g.opacity, col, row, cfg) else {
                    continue;
                };
                let wgt = alpha * t;
                for ch in 0..3 {
                    c[ch] += g.color[ch] * wgt;
                }
                a += wgt;
                dn += s.dist * wgt;
                t *= 1.0 - alpha;
            }
            let px = row * w + col;
            out.rgb[px * 3..px * 3 + 3].copy_from_slice(&c);
            out.alpha[px] = a;
            out.depth[px] = dn / a.max(cfg.alpha_eps);
        }
    }
    Ok(out)
}

/// Gradient of `Σ grad ⊙ rasterize(set)` with respect to every primitive.
pub fn rasterize_backward(
    set: &GaussianSet,
    camera: &CameraModel,
    cfg: &SplatConfig,
    grad: &RenderGrad,
) -> Result<Vec<GaussianGrad>> {
    let (h, w) = (camera.height, camera.width);
    let n = h * w;
    if grad.rgb.len() != n * 3 || grad.depth.len() != n || grad.alpha.len() != n {
        return Err(Error::shape("render gradient does not match the camera size"));
    }
    let prep = prepare(set, camera, cfg)?;
    let ns = prep.splats.len();
    // Per splat accumulators in screen space.
    let mut g_conic = vec![Matrix2::<f64>::zeros(); ns];
    let mut g_mean2 = vec![Vector2::<f64>::zeros(); ns];
    let mut g_dist = vec![0.0; ns];
    let mut out = vec![GaussianGrad::default(); set.len()];

    struct Entry {
        k: usize,
        alpha: f64,
        e: f64,
        clamped: bool,
        d: Vector2<f64>,
        t: f64,
    }
    let mut entries: Vec<Entry> = Vec::new();

    for row in 0..h {
        for col in 0..w {
            let px = row * w + col;
            let list = &prep.tiles[(row / TILE) * prep.tiles_x + col / TILE];
            entries.clear();
            let (mut t, mut a, mut dn) = (1.0, 0.0, 0.0);
            for &k in list {
                let s = &prep.splats[k as usize];
                let g = &set.gaussians[s.index];
                let Some((alpha, e, clamped, d)) = splat_alpha(s, g.opacity, col, row, cfg) else {
                    continue;
                };
                entries.push(Entry {
                    k: k as usize,
                    alpha,
                    e,
                    clamped,
                    d,
                    t,
                });
                a += alpha * t;
                dn += s.dist * alpha * t;
                t *= 1.0 - alpha;
            }
            if entries.is_empty() {
                continue;
            }
            let gc = [grad.rgb[px * 3], grad.rgb[px * 3 + 1], grad.rgb[px * 3 + 2]];
            let denom = a.max(cfg.alpha_eps);
            let g_dn = grad.depth[px] / denom;
            let g_a = grad.alpha[px] + if a > cfg.alpha_eps { -grad.depth[px] * dn / (a * a) } else { 0.0 };

            // r = Σ_{j>k} e_j α_j Π_{k<i<j}(1-α_i)
            let mut r = 0.0;
            for en in entries.iter().rev() {
                let s = &prep.splats[en.k];
                let g = &set.gaussians[s.index];
                let ek = gc[0] * g.color[0] + gc[1] * g.color[1] + gc[2] * g.color[2] + g_a + g_dn * s.dist;
                let d_alpha = en.t * (ek - r);
                r = ek * en.alpha + (1.0 - en.alpha) * r;

                let wgt = en.alpha * en.t;
                let og = &mut out[s.index];
                for ch in 0..3 {
                    og.color[ch] += gc[ch] * wgt;
                }
                g_dist[en.k] += g_dn * wgt;
                if !en.clamped {
                    og.opacity += d_alpha * en.e;
                    let dq = -0.5 * en.alpha * d_alpha;
                    g_conic[en.k] += en.d * en.d.transpose() * dq;
                    g_mean2[en.k] += s.conic * en.d * (-2.0 * dq);
                }
            }
        }
    }

    let wc = camera.rotation_matrix();
    let center = camera.center();
    let (fx, fy) = (camera.fx, camera.fy);
    for (k, s) in prep.splats.iter().enumerate() {
        let g = &set.gaussians[s.index];
        let g_cov = -(s.conic * g_conic[k] * s.conic);
        let g_sigma3 = s.m.transpose() * g_cov * s.m;
        let g_m = 2.0 * g_cov * s.m * s.sigma3;
        let g_j = g_m * wc.transpose();

        let (x, y, z) = (s.cam.x, s.cam.y, s.cam.z);
        let (iz, iz2, iz3) = (1.0 / z, 1.0 / (z * z), 1.0 / (z * z * z));
        let mut g_p = Vector3::new(
            -g_j[(0, 2)] * fx * iz2,
            -g_j[(1, 2)] * fy * iz2,
            -g_j[(0, 0)] * fx * iz2 + 2.0 * g_j[(0, 2)] * fx * x * iz3 - g_j[(1, 1)] * fy * iz2
                + 2.0 * g_j[(1, 2)] * fy * y * iz3,
        );
        let gm = g_mean2[k];
        g_p.x += gm.x * fx * iz;
        g_p.y += gm.y * fy * iz;
        g_p.z -= (gm.x * fx * x + gm.y * fy * y) * iz2;
        let mut g_mu = wc.transpose() * g_p;
        if s.dist > 0.0 {
            g_mu += (Vector3::from(g.mean) - center) * (g_dist[k] / s.dist);
        }

        let sc = Vector3::from(g.scale);
        let a_mat = s.rot * Matrix3::from_diagonal(&sc);
        let g_a = 2.0 * g_sigma3 * a_mat;
        let g_rot = g_a * Matrix3::from_diagonal(&sc);
        let og = &mut out[s.index];
        for j in 0..3 {
            og.mean[j] += g_mu[j];
            og.scale[j] += (0..3).map(|i| g_a[(i, j)] * s.rot[(i, j)]).sum::<f64>();
        }
        og.rotation = quat_matrix_grad(g.rotation, &g_rot);
    }
    Ok(out)
}

/// Gradient with respect to `[w, x, y, z]` of `Σ G ⊙ R(q)` for the polynomial
/// rotation-matrix form.
pub(crate) fn quat_matrix_grad(q: [f64; 4], g: &Matrix3<f64>) -> [f64; 4] {
    let [w, x, y, z] = q;
    let dw = Matrix3::new(0.0, -z, y, z, 0.0, -x, -y, x, 0.0);
    let dx = Matrix3::new(0.0, y, z, y, -2.0 * x, -w, z, w, -2.0 * x);
    let dy = Matrix3::new(-2.0 * y, x, w, x, 0.0, z, -w, z, -2.0 * y);
    let dz = Matrix3::new(-2.0 * z, -w, x, w, -2.0 * z, y, x, y, 0.0);
    [
        2.0 * g.component_mul(&dw).sum(),
        2.0 * g.component_mul(&dx).sum(),
        2.0 * g.component_mul(&dy).sum(),
        2.0 * g.component_mul(&dz).sum(),
    ]
}
