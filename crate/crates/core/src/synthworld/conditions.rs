//! Control signals: 3D boxes and lane polylines, rasterized per view.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::camera::CameraModel;
use super::scene::{SceneSpec, CLASS_PEDESTRIAN, CLASS_VEHICLE};

const NEAR: f64 = 0.1;
/// Half stroke width of rasterized lanes, in pixels.
pub const LANE_HALF_STROKE: f64 = 0.75;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3 {
    pub center: [f64; 3],
    /// Full extents along the box's local x, y, z.
    pub size: [f64; 3],
    /// Rotation about the vertical axis, radians.
    pub yaw: f64,
    pub class_id: u32,
}

impl Box3 {
    /// Local-frame coordinates of a world point.
    fn to_local(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let d = p - Vector3::from(self.center);
        let (s, c) = self.yaw.sin_cos();
        // inverse yaw about y
        Vector3::new(c * d.x - s * d.z, d.y, s * d.x + c * d.z)
    }

    fn dir_to_local(&self, d: &Vector3<f64>) -> Vector3<f64> {
        let (s, c) = self.yaw.sin_cos();
        Vector3::new(c * d.x - s * d.z, d.y, s * d.x + c * d.z)
    }

    pub fn corners(&self) -> [Vector3<f64>; 8] {
        let (s, c) = self.yaw.sin_cos();
        let h = [self.size[0] / 2.0, self.size[1] / 2.0, self.size[2] / 2.0];
        let mut out = [Vector3::zeros(); 8];
        for (i, o) in out.iter_mut().enumerate() {
            let lx = if i & 1 == 0 { -h[0] } else { h[0] };
            let ly = if i & 2 == 0 { -h[1] } else { h[1] };
            let lz = if i & 4 == 0 { -h[2] } else { h[2] };
            *o = Vector3::new(
                self.center[0] + c * lx + s * lz,
                self.center[1] + ly,
                self.center[2] - s * lx + c * lz,
            );
        }
        out
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        let l = self.to_local(p);
        (0..3).all(|a| l[a].abs() <= self.size[a] / 2.0 + 1e-9)
    }

    /// Whether a ray from `origin` hits the box beyond `near`.
    pub fn ray_hits(&self, origin: &Vector3<f64>, dir: &Vector3<f64>, near: f64) -> bool {
        let o = self.to_local(origin);
        let d = self.dir_to_local(dir);
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for a in 0..3 {
            let h = self.size[a] / 2.0;
            if d[a].abs() < 1e-15 {
                if o[a].abs() > h {
                    return false;
                }
                continue;
            }
            let (mut lo, mut hi) = ((-h - o[a]) / d[a], (h - o[a]) / d[a]);
            if lo > hi {
                std::mem::swap(&mut lo, &mut hi);
            }
            t0 = t0.max(lo);
            t1 = t1.min(hi);
            if t0 > t1 {
                return false;
            }
        }
        t1 > near
    }
}

pub fn class_intensity(class_id: u32) -> f32 {
    match class_id {
        CLASS_VEHICLE => 1.0,
        CLASS_PEDESTRIAN => 0.6,
        _ => 0.3,
    }
}

/// Boxes enclosing every primitive at scene time `t`.
pub fn boxes_at(scene: &SceneSpec, t: f64) -> Vec<Box3> {
    scene
        .primitives
        .iter()
        .map(|p| Box3 {
            center: p.center_at(t),
            size: [2.0 * p.half_extent[0], 2.0 * p.half_extent[1], 2.0 * p.half_extent[2]],
            yaw: 0.0,
            class_id: p.class_id,
        })
        .collect()
}

/// Filled box silhouettes with per-class intensity (max over overlaps).
pub fn rasterize_boxes(boxes: &[Box3], camera: &CameraModel) -> Vec<f32> {
    let (h, w) = (camera.height, camera.width);
    let mut raster = vec![0f32; h * w];
    let origin = camera.center();
    for b in boxes {
        // a box whose corners are all behind the camera is skipped
        if b.corners().iter().all(|c| camera.world_to_camera(c).z <= NEAR) {
            continue;
        }
        let value = class_intensity(b.class_id);
        for row in 0..h {
            for col in 0..w {
                let dir = camera.ray_direction(col as f64, row as f64);
                if b.ray_hits(&origin, &dir, NEAR) {
                    let px = &mut raster[row * w + col];
                    *px = px.max(value);
                }
            }
        }
    }
    raster
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let s = if len2 < 1e-18 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a.0 + s * dx - p.0, a.1 + s * dy - p.1);
    (qx * qx + qy * qy).sqrt()
}

/// Projected lane polylines with a fixed pixel stroke width, clipped at the near plane.
pub fn rasterize_lanes(lanes: &[Vec<[f64; 3]>], camera: &CameraModel) -> Vec<f32> {
    let (h, w) = (camera.height, camera.width);
    let mut raster = vec![0f32; h * w];
    for lane in lanes {
        for seg in lane.windows(2) {
            let mut a = camera.world_to_camera(&Vector3::from(seg[0]));
            let mut b = camera.world_to_camera(&Vector3::from(seg[1]));
            if a.z <= NEAR && b.z <= NEAR {
                continue;
            }
            if a.z <= NEAR || b.z <= NEAR {
                let s = (NEAR - a.z) / (b.z - a.z);
                let clip = a + (b - a) * s;
                if a.z <= NEAR {
                    a = clip;
                } else {
                    b = clip;
                }
            }
            let pa = (camera.fx * a.x / a.z + camera.cx, camera.fy * a.y / a.z + camera.cy);
            let pb = (camera.fx * b.x / b.z + camera.cx, camera.fy * b.y / b.z + camera.cy);
            let r = LANE_HALF_STROKE;
            let col_lo = (pa.0.min(pb.0) - r).floor().max(0.0);
            let col_hi = (pa.0.max(pb.0) + r).ceil().min(w as f64 - 1.0);
            let row_lo = (pa.1.min(pb.1) - r).floor().max(0.0);
            let row_hi = (pa.1.max(pb.1) + r).ceil().min(h as f64 - 1.0);
            if col_lo > col_hi || row_lo > row_hi {
                continue;
            }
            for row in row_lo as usize..=row_hi as usize {
                for col in col_lo as usize..=col_hi as usize {
                    if segment_distance((col as f64, row as f64), pa, pb) <= r {
                        raster[row * w + col] = 1.0;
                    }
                }
            }
        }
    }
    raster
}

/// Box and lane rasters for one camera at scene time `t`.
pub fn rasterize_conditions(scene: &SceneSpec, camera: &CameraModel, t: f64) -> (Vec<f32>, Vec<f32>) {
    (
        rasterize_boxes(&boxes_at(scene, t), camera),
        rasterize_lanes(&scene.lanes, camera),
    )
}

/// Per-clip control signal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConditions {
    pub text_tokens: Vec<u32>,
    /// Boxes per timestep.
    pub boxes: Vec<Vec<Box3>>,
    pub lanes: Vec<Vec<[f64; 3]>>,
    /// `T×V×H×W` box raster.
    #[serde(skip)]
    pub box_raster: Vec<f32>,
    /// `T×V×H×W` lane raster.
    #[serde(skip)]
    pub lane_raster: Vec<f32>,
}
