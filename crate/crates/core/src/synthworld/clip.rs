use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::camera::CameraModel;
use super::conditions::{boxes_at, rasterize_conditions, SceneConditions};
use super::raytrace::raytrace_view;
use super::scene::SceneSpec;
use crate::error::{Error, Result};

/// Default clip length in frames.
pub const DEFAULT_FRAMES: usize = 19;
/// Default spacing between frames, seconds (2 Hz).
pub const DEFAULT_FRAME_DT: f64 = 0.5;

/// `T` frames × `V` views of images, dense depth, cameras and conditions.
///
/// Image data is `T×V×H×W×3` row-major; depth and rasters are `T×V×H×W`;
/// cameras are indexed `t * V + v`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiViewClip {
    pub id: String,
    pub n_frames: usize,
    pub n_views: usize,
    pub height: usize,
    pub width: usize,
    pub images: Vec<f32>,
    pub depth: Vec<f32>,
    pub cameras: Vec<CameraModel>,
    pub timestamps: Vec<f64>,
    pub conditions: SceneConditions,
    pub view_valid: Vec<bool>,
    pub sky_color: [f64; 3],
}

impl MultiViewClip {
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn camera(&self, t: usize, v: usize) -> &CameraModel {
        &self.cameras[t * self.n_views + v]
    }

    pub fn image(&self, t: usize, v: usize) -> &[f32] {
        let n = self.pixels() * 3;
        let off = (t * self.n_views + v) * n;
        &self.images[off..off + n]
    }

    pub fn depth_map(&self, t: usize, v: usize) -> &[f32] {
        let n = self.pixels();
        let off = (t * self.n_views + v) * n;
        &self.depth[off..off + n]
    }

    pub fn box_raster(&self, t: usize, v: usize) -> &[f32] {
        let n = self.pixels();
        let off = (t * self.n_views + v) * n;
        &self.conditions.box_raster[off..off + n]
    }

    pub fn lane_raster(&self, t: usize, v: usize) -> &[f32] {
        let n = self.pixels();
        let off = (t * self.n_views + v) * n;
        &self.conditions.lane_raster[off..off + n]
    }

    pub fn valid_view_count(&self) -> usize {
        self.view_valid.iter().filter(|&&v| v).count()
    }

    /// Structural checks: array sizes, finite images, positive finite depth.
    pub fn validate(&self) -> Result<()> {
        let err = |reason: String| Error::Dataset { clip: self.id.clone(), reason };
        let tv = self.n_frames * self.n_views;
        let px = self.pixels();
        if self.images.len() != tv * px * 3 || self.depth.len() != tv * px {
            return Err(err("image/depth array sizes do not match the header".into()));
        }
        if self.cameras.len() != tv || self.timestamps.len() != self.n_frames || self.view_valid.len() != self.n_views {
            return Err(err("camera/timestamp/view arrays do not match the header".into()));
        }
        if self.conditions.box_raster.len() != tv * px || self.conditions.lane_raster.len() != tv * px {
            return Err(err("raster sizes do not match the header".into()));
        }
        if self.images.iter().any(|v| !v.is_finite()) {
            return Err(err("non-finite image value".into()));
        }
        if self.depth.iter().any(|&d| d.is_finite() && d <= 0.0) {
            return Err(err("non-positive depth".into()));
        }
        Ok(())
    }
}

/// `n` timestamps starting at 0 with spacing `dt`.
pub fn default_timestamps(n: usize, dt: f64) -> Vec<f64> {
    (0..n).map(|i| i as f64 * dt).collect()
}

/// Ray-traces every (frame, view) pair and rasterizes the conditions.
///
/// `rig` cameras are expressed in the ego frame; the ego trajectory of the
/// scene is folded into the per-frame extrinsics.
pub fn render_clip(id: impl Into<String>, scene: &SceneSpec, rig: &[CameraModel], timestamps: &[f64]) -> Result<MultiViewClip> {
    let id = id.into();
    if rig.is_empty() {
        return Err(Error::config("empty camera rig"));
    }
    if timestamps.is_empty() || timestamps.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::config("timestamps must be non-empty and strictly increasing"));
    }
    let (h, w) = (rig[0].height, rig[0].width);
    if rig.iter().any(|c| c.height != h || c.width != w) {
        return Err(Error::config("all rig cameras must share the image size"));
    }
    let (n_t, n_v) = (timestamps.len(), rig.len());
    let mut images = Vec::with_capacity(n_t * n_v * h * w * 3);
    let mut depth = Vec::with_capacity(n_t * n_v * h * w);
    let mut box_raster = Vec::with_capacity(n_t * n_v * h * w);
    let mut lane_raster = Vec::with_capacity(n_t * n_v * h * w);
    let mut cameras = Vec::with_capacity(n_t * n_v);
    let mut boxes = Vec::with_capacity(n_t);
    for &t in timestamps {
        let pose = scene.ego.pose(t);
        for cam in rig {
            let cam_t = cam.with_ego_pose(&pose);
            cam_t.validate()?;
            let (img, d) = raytrace_view(scene, &cam_t, t);
            let (br, lr) = rasterize_conditions(scene, &cam_t, t);
            images.extend_from_slice(&img);
            depth.extend_from_slice(&d);
            box_raster.extend_from_slice(&br);
            lane_raster.extend_from_slice(&lr);
            cameras.push(cam_t);
        }
        boxes.push(boxes_at(scene, t));
    }
    let clip = MultiViewClip {
        id,
        n_frames: n_t,
        n_views: n_v,
        height: h,
        width: w,
        images,
        depth,
        cameras,
        timestamps: timestamps.to_vec(),
        conditions: SceneConditions {
            text_tokens: scene.text_tokens(),
            boxes,
            lanes: scene.lanes.clone(),
            box_raster,
            lane_raster,
        },
        view_valid: vec![true; n_v],
        sky_color: scene.sky_color,
    };
    clip.validate()?;
    Ok(clip)
}

/// Emulates sparse range sensing: keeps each finite depth sample with
/// probability `keep`, marking the rest unobserved (NaN).
pub fn sparsify_depth(clip: &mut MultiViewClip, keep: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for d in clip.depth.iter_mut() {
        if d.is_finite() && !rng.random_bool(keep.clamp(0.0, 1.0)) {
            *d = f32::NAN;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthworld::camera::make_camera_rig;
    use crate::synthworld::scene::{sample_scene, EgoTrajectory, Primitive, SceneComplexity, Shape, CLASS_PEDESTRIAN};

    #[test]
    fn static_scene_frames_identical() {
        let mut scene = sample_scene(3, &SceneComplexity::default()).unwrap();
        scene.ego = EgoTrajectory { speed: 0.0, yaw_rate: 0.0 };
        for p in &mut scene.primitives {
            p.velocity = [0.0; 3];
        }
        let rig = make_camera_rig(2, 90.0, 16, 16).unwrap();
        let clip = render_clip("c", &scene, &rig, &default_timestamps(5, 0.5)).unwrap();
        for v in 0..2 {
            assert_eq!(clip.image(0, v), clip.image(4, v));
            assert_eq!(clip.depth_map(0, v), clip.depth_map(4, v));
        }
    }

    #[test]
    fn default_length_is_nineteen() {
        let scene = sample_scene(0, &SceneComplexity::default()).unwrap();
        let rig = make_camera_rig(1, 90.0, 8, 8).unwrap();
        let clip = render_clip("c", &scene, &rig, &default_timestamps(DEFAULT_FRAMES, DEFAULT_FRAME_DT)).unwrap();
        assert_eq!(clip.n_frames, 19);
        assert_eq!(clip.images.len(), 19 * 8 * 8 * 3);
    }

    #[test]
    fn non_increasing_timestamps_rejected() {
        let scene = sample_scene(0, &SceneComplexity::default()).unwrap();
        let rig = make_camera_rig(1, 90.0, 8, 8).unwrap();
        assert!(render_clip("c", &scene, &rig, &[0.0, 0.5, 0.5]).is_err());
    }

    #[test]
    fn moving_sphere_box_centroid_is_monotone() {
        let mut scene = SceneSpec::empty([0.5, 0.6, 0.9]);
        scene.primitives.push(Primitive {
            shape: Shape::Sphere,
            center: [-3.0, 0.0, 10.0],
            half_extent: [0.8; 3],
            albedo: [0.9, 0.2, 0.2],
            velocity: [1.0, 0.0, 0.0],
            class_id: CLASS_PEDESTRIAN,
        });
        let rig = make_camera_rig(1, 90.0, 32, 32).unwrap();
        let clip = render_clip("c", &scene, &rig, &default_timestamps(7, 1.0)).unwrap();
        let centroids: Vec<f64> = (0..7)
            .map(|t| {
                let r = clip.box_raster(t, 0);
                let (mut s, mut m) = (0.0, 0.0);
                for (i, &v) in r.iter().enumerate() {
                    s += v as f64 * (i % 32) as f64;
                    m += v as f64;
                }
                assert!(m > 0.0);
                s / m
            })
            .collect();
        assert!(centroids.windows(2).all(|w| w[1] > w[0]), "{centroids:?}");
    }

    #[test]
    fn infinite_depth_iff_sky_color() {
        let scene = sample_scene(11, &SceneComplexity::default()).unwrap();
        let rig = make_camera_rig(3, 90.0, 24, 24).unwrap();
        let clip = render_clip("c", &scene, &rig, &default_timestamps(3, 0.5)).unwrap();
        let sky = scene.sky_color.map(|c| c as f32);
        for (px, d) in clip.images.chunks(3).zip(&clip.depth) {
            if d.is_infinite() {
                assert_eq!(px, &sky);
            } else {
                assert!(*d > 0.0);
            }
        }
    }

    #[test]
    fn sparsify_keeps_fraction() {
        let scene = sample_scene(5, &SceneComplexity::default()).unwrap();
        let rig = make_camera_rig(1, 90.0, 32, 32).unwrap();
        let mut clip = render_clip("c", &scene, &rig, &[0.0]).unwrap();
        let before = clip.depth.iter().filter(|d| d.is_finite()).count();
        sparsify_depth(&mut clip, 0.25, 1);
        let after = clip.depth.iter().filter(|d| d.is_finite()).count();
        let frac = after as f64 / before as f64;
        assert!((frac - 0.25).abs() < 0.08, "{frac}");
    }
}
