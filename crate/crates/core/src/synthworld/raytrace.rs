//! Analytic ray tracer used as ground truth for images and dense depth.

use nalgebra::Vector3;

use super::camera::CameraModel;
use super::scene::{SceneSpec, Shape};

/// Surface hit: Euclidean distance along the (unit) ray, outward normal, base color.
#[derive(Debug, Clone, Copy)]
pub struct Hit {
    pub distance: f64,
    pub normal: Vector3<f64>,
    pub albedo: [f64; 3],
}

/// Distance to the nearest intersection with a sphere, if any, in front of the origin.
pub fn intersect_sphere(origin: &Vector3<f64>, dir: &Vector3<f64>, center: &Vector3<f64>, radius: f64) -> Option<f64> {
    let oc = origin - center;
    let b = oc.dot(dir);
    let c = oc.norm_squared() - radius * radius;
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let t0 = -b - sq;
    let t1 = -b + sq;
    if t0 > 1e-9 {
        Some(t0)
    } else if t1 > 1e-9 {
        Some(t1)
    } else {
        None
    }
}

/// Slab test against an axis-aligned box; returns entry distance and the hit axis.
pub fn intersect_aabb(
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
    center: &Vector3<f64>,
    half: &Vector3<f64>,
) -> Option<(f64, usize, f64)> {
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    let mut axis = 0;
    let mut sign = 1.0;
    for a in 0..3 {
        let lo = center[a] - half[a];
        let hi = center[a] + half[a];
        if dir[a].abs() < 1e-15 {
            if origin[a] < lo || origin[a] > hi {
                return None;
            }
            continue;
        }
        let inv = 1.0 / dir[a];
        let (mut t0, mut t1) = ((lo - origin[a]) * inv, (hi - origin[a]) * inv);
        let mut s = -1.0;
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
            s = 1.0;
        }
        if t0 > t_near {
            t_near = t0;
            axis = a;
            sign = s;
        }
        t_far = t_far.min(t1);
        if t_near > t_far {
            return None;
        }
    }
    if t_near > 1e-9 {
        Some((t_near, axis, sign))
    } else {
        None
    }
}

/// Nearest surface hit along a unit ray at scene time `t`.
pub fn trace_ray(scene: &SceneSpec, origin: &Vector3<f64>, dir: &Vector3<f64>, t: f64) -> Option<Hit> {
    let mut best: Option<Hit> = None;
    let mut consider = |h: Hit| {
        if best.map_or(true, |b| h.distance < b.distance) {
            best = Some(h);
        }
    };

    for p in &scene.primitives {
        let c = Vector3::from(p.center_at(t));
        match p.shape {
            Shape::Sphere => {
                if let Some(d) = intersect_sphere(origin, dir, &c, p.half_extent[0]) {
                    let n = (origin + dir * d - c).normalize();
                    consider(Hit { distance: d, normal: n, albedo: p.albedo });
                }
            }
            Shape::Box => {
                let half = Vector3::from(p.half_extent);
                if let Some((d, axis, sign)) = intersect_aabb(origin, dir, &c, &half) {
                    let mut n = Vector3::zeros();
                    n[axis] = sign;
                    consider(Hit { distance: d, normal: n, albedo: p.albedo });
                }
            }
        }
    }

    let g = &scene.ground;
    if dir.y > 1e-12 && g.height.is_finite() {
        let d = (g.height - origin.y) / dir.y;
        if d > 1e-9 {
            let hit = origin + dir * d;
            let on_lane = scene.lanes.iter().any(|lane| {
                lane.windows(2).any(|w| {
                    let (z0, z1) = (w[0][2].min(w[1][2]), w[0][2].max(w[1][2]));
                    if hit.z < z0 || hit.z > z1 || (z1 - z0) < 1e-12 {
                        return false;
                    }
                    let s = (hit.z - w[0][2]) / (w[1][2] - w[0][2]);
                    let x = w[0][0] + s * (w[1][0] - w[0][0]);
                    (hit.x - x).abs() < g.lane_half_width
                })
            });
            let albedo = if on_lane {
                g.lane_color
            } else {
                let parity = ((hit.x / g.tile_size).floor() as i64 + (hit.z / g.tile_size).floor() as i64).rem_euclid(2);
                if parity == 0 { g.color_a } else { g.color_b }
            };
            consider(Hit {
                distance: d,
                normal: Vector3::new(0.0, -1.0, 0.0),
                albedo,
            });
        }
    }

    best.filter(|h| h.distance <= scene.draw_distance)
}

/// Lambertian shading from one directional light plus ambient, no shadows.
pub fn shade(scene: &SceneSpec, hit: &Hit) -> [f64; 3] {
    let to_light = -Vector3::from(scene.light_dir);
    let lambert = hit.normal.dot(&to_light).max(0.0);
    let k = scene.ambient + scene.light_intensity * lambert;
    [
        (hit.albedo[0] * k).clamp(0.0, 1.0),
        (hit.albedo[1] * k).clamp(0.0, 1.0),
        (hit.albedo[2] * k).clamp(0.0, 1.0),
    ]
}

/// Renders one view at scene time `t`; returns `(rgb H×W×3, depth H×W)`.
/// Depth is the Euclidean distance along the ray, `+∞` where the sky is seen.
pub fn raytrace_view(scene: &SceneSpec, camera: &CameraModel, t: f64) -> (Vec<f32>, Vec<f32>) {
    let (h, w) = (camera.height, camera.width);
    let mut image = vec![0f32; h * w * 3];
    let mut depth = vec![f32::INFINITY; h * w];
    let origin = camera.center();
    for row in 0..h {
        for col in 0..w {
            let dir = camera.ray_direction(col as f64, row as f64);
            let px = row * w + col;
            let rgb = match trace_ray(scene, &origin, &dir, t) {
                Some(hit) => {
                    depth[px] = hit.distance as f32;
                    shade(scene, &hit)
                }
                None => scene.sky_color,
            };
            for c in 0..3 {
                image[px * 3 + c] = rgb[c] as f32;
            }
        }
    }
    (image, depth)
}
