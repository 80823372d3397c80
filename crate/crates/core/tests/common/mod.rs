//! Shared fixtures for integration tests and the acceptance runner.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splatworld::splatcore::{GaussianPrimitive, GaussianSet, PixelGaussianGrid, GRID_CHANNELS, RAW_CHANNELS};
use splatworld::synthworld::camera::yaw_quaternion;
use splatworld::synthworld::CameraModel;

/// A slightly yawed and offset camera so tests do not rely on identity poses.
pub fn test_camera(n: usize) -> CameraModel {
    let f = n as f64 * 0.6;
    CameraModel {
        rotation: yaw_quaternion(0.15),
        translation: [0.3, -0.2, 0.1],
        ..CameraModel::identity(f, f, n as f64 / 2.0, n as f64 / 2.0, n, n)
    }
}

fn unit_quat(rng: &mut ChaCha8Rng) -> [f64; 4] {
    let q: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-6);
    q.map(|v| v / n)
}

/// Up to `max_n` random Gaussians in front of `camera`.
pub fn random_gaussian_set(seed: u64, max_n: usize, camera: &CameraModel) -> GaussianSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(0..=max_n);
    let w2c = camera.rotation_matrix();
    let center = camera.center();
    let gaussians = (0..n)
        .map(|_| {
            let z = rng.random_range(1.0..20.0);
            let x = rng.random_range(-0.9..0.9) * z;
            let y = rng.random_range(-0.9..0.9) * z;
            let world = w2c.transpose() * nalgebra::Vector3::new(x, y, z) + center;
            GaussianPrimitive::new(
                [world.x, world.y, world.z],
                unit_quat(&mut rng),
                std::array::from_fn(|_| rng.random_range(0.02..1.5)),
                rng.random_range(0.02..0.99),
                std::array::from_fn(|_| rng.random_range(0.0..1.0)),
                std::array::from_fn(|_| rng.random_range(-1.0..1.0)),
                rng.random_range(0.0..2.0),
            )
        })
        .collect();
    GaussianSet::new(gaussians)
}

/// A small interleaved raw grid (`h×w×15`) with moderate activations.
pub fn random_grid_data(rng: &mut ChaCha8Rng, pixels: usize) -> Vec<f64> {
    let mut data = vec![0.0; pixels * GRID_CHANNELS];
    for px in data.chunks_exact_mut(GRID_CHANNELS) {
        px[0] = rng.random_range(-3.2..-1.8);
        for c in 1..5 {
            px[c] = rng.random_range(-1.0..1.0);
        }
        px[1] += 1.5;
        for c in 5..8 {
            px[c] = rng.random_range(-2.0..-0.3);
        }
        px[8] = rng.random_range(-1.0..1.5);
        for c in 9..12 {
            px[c] = rng.random_range(-2.0..2.0);
        }
        for c in RAW_CHANNELS..GRID_CHANNELS {
            px[c] = rng.random_range(-0.5..0.5);
        }
    }
    data
}

pub fn grid(data: &[f64], camera: CameraModel, time: f64) -> PixelGaussianGrid {
    PixelGaussianGrid::from_interleaved(data, camera, time).unwrap()
}

pub const GROUP_NAMES: [&str; 6] = ["depth", "quaternion", "scale", "opacity", "color", "velocity"];
const GROUP_CHANNELS: [std::ops::Range<usize>; 6] = [0..1, 1..5, 5..8, 8..9, 9..12, 12..15];

/// Weights of the scalar loss `Σ w_rgb·rgb + w_depth·depth + w_alpha·alpha`.
#[derive(Clone, Copy)]
pub struct LossWeights {
    pub rgb: f64,
    pub depth: f64,
    pub alpha: f64,
}

fn weighted_loss(out: &splatworld::splatcore::RenderOutput, w: LossWeights) -> f64 {
    w.rgb * out.rgb.iter().sum::<f64>() + w.depth * out.depth.iter().sum::<f64>() + w.alpha * out.alpha.iter().sum::<f64>()
}

/// Relative error `‖analytic − fd‖ / max(‖fd‖, ‖analytic‖)` per parameter group
/// for 8 pixel-aligned Gaussians rendered at 16×16; `None` when the
/// configuration has a near sort tie.
pub fn gradient_check(seed: u64, w: LossWeights) -> Option<[f64; 6]> {
    use splatworld::splatcore::{render_grids, render_grids_backward, transport, decode_raw, RenderGrad, SplatConfig};
    let cfg = SplatConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let src = CameraModel::identity(2.0, 2.0, 1.5, 0.5, 2, 4);
    let target = test_camera(16);
    let (t_src, t_tgt) = (0.0, 0.7);
    let data = random_grid_data(&mut rng, 8);

    let g = grid(&data, src, t_src);
    let moved = transport(&decode_raw(&g, &cfg).unwrap(), t_tgt);
    let mut zs: Vec<f64> = moved.gaussians.iter().map(|p| target.world_to_camera(&nalgebra::Vector3::from(p.mean)).z).collect();
    zs.sort_by(f64::total_cmp);
    if zs.windows(2).any(|p| p[1] - p[0] <= 1e-3) {
        return None;
    }

    let n = 16 * 16;
    let upstream = RenderGrad {
        rgb: vec![w.rgb; n * 3],
        depth: vec![w.depth; n],
        alpha: vec![w.alpha; n],
    };
    let analytic = render_grids_backward(&[g], &target, t_tgt, &cfg, &upstream).unwrap()[0].interleaved();
    let loss = |d: &[f64]| weighted_loss(&render_grids(&[grid(d, src, t_src)], &target, t_tgt, &cfg).unwrap(), w);
    let h = 1e-4;
    let mut fd = vec![0.0; data.len()];
    for i in 0..data.len() {
        let (mut a, mut b) = (data.clone(), data.clone());
        a[i] += h;
        b[i] -= h;
        fd[i] = (loss(&a) - loss(&b)) / (2.0 * h);
    }
    Some(std::array::from_fn(|gi| {
        let (mut num, mut nf, mut na) = (0.0, 0.0, 0.0);
        for px in 0..8 {
            for c in GROUP_CHANNELS[gi].clone() {
                let i = px * GRID_CHANNELS + c;
                num += (analytic[i] - fd[i]).powi(2);
                nf += fd[i] * fd[i];
                na += analytic[i] * analytic[i];
            }
        }
        let scale = nf.sqrt().max(na.sqrt());
        if scale < 1e-10 {
            0.0
        } else {
            num.sqrt() / scale
        }
    }))
}
