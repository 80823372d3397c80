//! Pinhole camera model and rig construction.
//!
//! World frame convention: x right, y down, z forward (the ego heading at
//! t = 0). Pixel `(row, col)` has its center at image coordinates
//! `(u, v) = (col, row)`.

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const QUAT_NORM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// World-to-camera rotation as `[w, x, y, z]`.
    pub rotation: [f64; 4],
    /// World-to-camera translation in meters.
    pub translation: [f64; 3],
    pub height: usize,
    pub width: usize,
}

impl CameraModel {
    /// Camera at the world origin looking down +z.
    pub fn identity(fx: f64, fy: f64, cx: f64, cy: f64, height: usize, width: usize) -> Self {
        Self {
            fx,
            fy,
            cx,
            cy,
            rotation: [1.0, 0.0, 0.0, 0.0],
            translation: [0.0; 3],
            height,
            width,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let q = self.rotation;
        let norm = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
        if !((norm - 1.0).abs() < QUAT_NORM_TOL) {
            return Err(Error::config(format!("camera quaternion norm {norm} is not 1")));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) || !self.fx.is_finite() || !self.fy.is_finite() {
            return Err(Error::config("focal lengths must be positive and finite"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::config("image size must be non-zero"));
        }
        if !(0.0..self.width as f64).contains(&self.cx) || !(0.0..self.height as f64).contains(&self.cy)
        {
            return Err(Error::config("principal point outside the image"));
        }
        if self.translation.iter().any(|t| !t.is_finite()) {
            return Err(Error::config("camera translation must be finite"));
        }
        Ok(())
    }

    pub fn unit_quaternion(&self) -> UnitQuaternion<f64> {
        let [w, x, y, z] = self.rotation;
        UnitQuaternion::new_unchecked(Quaternion::new(w, x, y, z))
    }

    /// World-to-camera rotation matrix.
    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        quat_to_matrix(self.rotation)
    }

    pub fn translation_vec(&self) -> Vector3<f64> {
        Vector3::from(self.translation)
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation_matrix().transpose() * self.translation_vec())
    }

    /// Optical axis in world coordinates.
    pub fn forward(&self) -> Vector3<f64> {
        self.rotation_matrix().transpose() * Vector3::z()
    }

    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation_matrix() * p + self.translation_vec()
    }

    /// Projects a world point; `None` when it is not strictly in front of `near`.
    pub fn project(&self, p: &Vector3<f64>, near: f64) -> Option<(f64, f64, f64)> {
        let pc = self.world_to_camera(p);
        (pc.z > near).then(|| {
            (
                self.fx * pc.x / pc.z + self.cx,
                self.fy * pc.y / pc.z + self.cy,
                pc.z,
            )
        })
    }

    /// Unit ray direction (world frame) through image coordinates `(u, v)`.
    pub fn ray_direction(&self, u: f64, v: f64) -> Vector3<f64> {
        let d = Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0);
        (self.rotation_matrix().transpose() * d).normalize()
    }

    /// Returns a copy whose world-to-camera transform is `self ∘ pose⁻¹`,
    /// where `pose` maps ego coordinates into the world.
    pub fn with_ego_pose(&self, pose: &EgoPose) -> Self {
        let ego_rot = UnitQuaternion::new_normalize(Quaternion::new(
            pose.rotation[0],
            pose.rotation[1],
            pose.rotation[2],
            pose.rotation[3],
        ));
        let cam_rot = self.unit_quaternion();
        // world -> ego is ego_rot⁻¹ (p - position); then ego -> camera.
        let rot = UnitQuaternion::new_normalize((cam_rot * ego_rot.inverse()).into_inner());
        let pos = Vector3::from(pose.position);
        let t = cam_rot * (ego_rot.inverse() * (-pos)) + self.translation_vec();
        let q = rot.into_inner();
        Self {
            rotation: [q.w, q.i, q.j, q.k],
            translation: [t.x, t.y, t.z],
            ..*self
        }
    }
}

/// Ego pose: ego-to-world rotation `[w, x, y, z]` and ego position in the world.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EgoPose {
    pub rotation: [f64; 4],
    pub position: [f64; 3],
}

impl EgoPose {
    pub fn identity() -> Self {
        Self {
            rotation: [1.0, 0.0, 0.0, 0.0],
            position: [0.0; 3],
        }
    }
}

pub fn quat_to_matrix(q: [f64; 4]) -> Matrix3<f64> {
    let [w, x, y, z] = q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Quaternion `[w, x, y, z]` of a rotation by `angle` radians about the world
/// vertical (y) axis.
pub fn yaw_quaternion(angle: f64) -> [f64; 4] {
    let h = 0.5 * angle;
    [h.cos(), 0.0, h.sin(), 0.0]
}

/// `n_views` pinhole cameras at the ego origin, yaw-spaced evenly around the
/// vertical axis, sharing intrinsics derived from the horizontal field of view.
pub fn make_camera_rig(n_views: usize, fov_deg: f64, height: usize, width: usize) -> Result<Vec<CameraModel>> {
    if n_views < 1 {
        return Err(Error::config("camera rig needs at least one view"));
    }
    if !(10.0..=120.0).contains(&fov_deg) {
        return Err(Error::config(format!("field of view {fov_deg} outside [10, 120] degrees")));
    }
    if height == 0 || width == 0 {
        return Err(Error::config("image size must be non-zero"));
    }
    let focal = (width as f64 / 2.0) / (fov_deg.to_radians() / 2.0).tan();
    (0..n_views)
        .map(|v| {
            let yaw = (v as f64 * 360.0 / n_views as f64).to_radians();
            // camera-to-world is a yaw rotation; store its inverse.
            let [w, x, y, z] = yaw_quaternion(yaw);
            let cam = CameraModel {
                rotation: [w, -x, -y, -z],
                ..CameraModel::identity(focal, focal, width as f64 / 2.0, height as f64 / 2.0, height, width)
            };
            cam.validate()?;
            Ok(cam)
        })
        .collect()
}
