//! Brute-force reference renderer: every pixel visits every primitive.
//!
//! Deliberately shares no projection or compositing code with the tiled
//! rasterizer so the two can be compared.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Quaternion, SymmetricEigen, UnitQuaternion, Vector2, Vector3};

use super::gaussian::GaussianSet;
use super::render::{RenderOutput, RenderStats};
use super::SplatConfig;
use crate::error::{Error, Result};
use crate::synthworld::CameraModel;

struct Footprint {
    z: f64,
    index: usize,
    mean2: Vector2<f64>,
    inv_cov: Matrix2<f64>,
    dist: f64,
}

/// Maximum number of primitives accepted.
pub const ORACLE_LIMIT: usize = 10_000;

pub fn oracle_render(set: &GaussianSet, camera: &CameraModel, cfg: &SplatConfig) -> Result<RenderOutput> {
    if set.len() > ORACLE_LIMIT {
        return Err(Error::config(format!("oracle accepts at most {ORACLE_LIMIT} gaussians")));
    }
    camera.validate()?;
    let cam_rot = camera.unit_quaternion().to_rotation_matrix();
    let cam_t = Vector3::from(camera.translation);
    let center = -(cam_rot.inverse() * cam_t);

    let mut stats = RenderStats::default();
    let mut feet = Vec::new();
    for (index, g) in set.gaussians.iter().enumerate() {
        let mu = Vector3::from(g.mean);
        let pc = cam_rot * mu + cam_t;
        if pc.z <= cfg.near_cull {
            stats.culled += 1;
            continue;
        }
        let [w, x, y, z] = g.rotation;
        let r = UnitQuaternion::from_quaternion(Quaternion::new(w, x, y, z)).to_rotation_matrix();
        let s2 = Matrix3::from_diagonal(&Vector3::new(g.scale[0].powi(2), g.scale[1].powi(2), g.scale[2].powi(2)));
        let sigma = r.matrix() * s2 * r.matrix().transpose();
        let jac = Matrix2x3::new(
            camera.fx / pc.z,
            0.0,
            -camera.fx * pc.x / (pc.z * pc.z),
            0.0,
            camera.fy / pc.z,
            -camera.fy * pc.y / (pc.z * pc.z),
        );
        let wm = cam_rot.matrix();
        let cov = jac * wm * sigma * wm.transpose() * jac.transpose() + Matrix2::identity() * cfg.dilation;
        let cov = (cov + cov.transpose()) * 0.5;
        let eig = SymmetricEigen::new(cov).eigenvalues;
        let (lo, hi) = (eig.min(), eig.max());
        let Some(inv_cov) = cov.try_inverse() else {
            stats.degenerate += 1;
            continue;
        };
        if lo <= 0.0 || hi / lo > cfg.max_condition {
            stats.degenerate += 1;
            continue;
        }
        feet.push(Footprint {
            z: pc.z,
            index,
            mean2: Vector2::new(camera.fx * pc.x / pc.z + camera.cx, camera.fy * pc.y / pc.z + camera.cy),
            inv_cov,
            dist: (mu - center).norm(),
        });
    }
    stats.drawn = feet.len();

    let (h, wd) = (camera.height, camera.width);
    let mut out = RenderOutput::zeros(h, wd);
    out.stats = stats;
    let mut layers: Vec<(f64, usize, f64, f64, [f64; 3])> = Vec::with_capacity(feet.len());
    for row in 0..h {
        for col in 0..wd {
            layers.clear();
            for f in &feet {
                let d = Vector2::new(col as f64, row as f64) - f.mean2;
                let m = (d.transpose() * f.inv_cov * d)[(0, 0)];
                let g = &set.gaussians[f.index];
                let alpha = (g.opacity * (-m / 2.0).exp()).min(cfg.alpha_max);
                layers.push((f.z, f.index, alpha, f.dist, g.color));
            }
            layers.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            let mut rgb = [0.0; 3];
            let mut acc = 0.0;
            let mut depth_sum = 0.0;
            for (i, &(_, _, alpha, dist, color)) in layers.iter().enumerate() {
                let trans: f64 = layers[..i].iter().map(|l| 1.0 - l.2).product();
                for c in 0..3 {
                    rgb[c] += color[c] * alpha * trans;
                }
                acc += alpha * trans;
                depth_sum += dist * alpha * trans;
            }
            let px = row * wd + col;
            out.rgb[px * 3..px * 3 + 3].copy_from_slice(&rgb);
            out.alpha[px] = acc;
            out.depth[px] = depth_sum / acc.max(cfg.alpha_eps);
        }
    }
    Ok(out)
}
