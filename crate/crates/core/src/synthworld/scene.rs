//! Procedural dynamic scenes: rigid primitives on a checkered ground plane,
//! lane polylines, a sky color and a constant-velocity ego trajectory.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::camera::{yaw_quaternion, EgoPose};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Sphere,
    Box,
}

/// Semantic class ids used by primitives and boxes.
pub const CLASS_VEHICLE: u32 = 0;
pub const CLASS_PEDESTRIAN: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    pub center: [f64; 3],
    /// Sphere radius is stored in every component.
    pub half_extent: [f64; 3],
    pub albedo: [f64; 3],
    pub velocity: [f64; 3],
    pub class_id: u32,
}

impl Primitive {
    pub fn center_at(&self, t: f64) -> [f64; 3] {
        [
            self.center[0] + self.velocity[0] * t,
            self.center[1] + self.velocity[1] * t,
            self.center[2] + self.velocity[2] * t,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundPlane {
    /// The plane is `y = height`; y points down so this is below the ego.
    pub height: f64,
    pub color_a: [f64; 3],
    pub color_b: [f64; 3],
    pub tile_size: f64,
    pub lane_color: [f64; 3],
    pub lane_half_width: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weather {
    Clear,
    Overcast,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeOfDay {
    Day,
    Dusk,
}

/// Toy text vocabulary. Id 0 is the null token used for unconditional passes.
pub mod vocab {
    pub const NULL: u32 = 0;
    pub const CLEAR: u32 = 1;
    pub const OVERCAST: u32 = 2;
    pub const DAY: u32 = 3;
    pub const DUSK: u32 = 4;
    pub const FEW: u32 = 5;
    pub const SEVERAL: u32 = 6;
    pub const MANY: u32 = 7;
    pub const SIZE: usize = 8;
}

/// Constant forward speed along the ego heading plus a constant yaw rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EgoTrajectory {
    pub speed: f64,
    pub yaw_rate: f64,
}

impl EgoTrajectory {
    pub fn pose(&self, t: f64) -> EgoPose {
        let yaw = self.yaw_rate * t;
        let position = if self.yaw_rate.abs() < 1e-12 {
            [0.0, 0.0, self.speed * t]
        } else {
            // arc of radius speed / yaw_rate
            let r = self.speed / self.yaw_rate;
            [r * (1.0 - yaw.cos()), 0.0, r * yaw.sin()]
        };
        EgoPose {
            rotation: yaw_quaternion(yaw),
            position,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub primitives: Vec<Primitive>,
    pub ground: GroundPlane,
    pub sky_color: [f64; 3],
    /// Direction the light travels (unit vector).
    pub light_dir: [f64; 3],
    pub light_intensity: f64,
    pub ambient: f64,
    /// Hits further than this are treated as sky.
    pub draw_distance: f64,
    pub lanes: Vec<Vec<[f64; 3]>>,
    pub ego: EgoTrajectory,
    pub weather: Weather,
    pub time_of_day: TimeOfDay,
    pub seed: u64,
}

impl SceneSpec {
    /// An empty scene: no primitives, no lanes, and no ground within reach.
    pub fn empty(sky_color: [f64; 3]) -> Self {
        Self {
            primitives: Vec::new(),
            ground: GroundPlane {
                height: f64::INFINITY,
                color_a: [0.5; 3],
                color_b: [0.5; 3],
                tile_size: 1.0,
                lane_color: [1.0; 3],
                lane_half_width: 0.0,
            },
            sky_color,
            light_dir: normalize([0.3, 1.0, 0.5]),
            light_intensity: 0.8,
            ambient: 0.3,
            draw_distance: 1e9,
            lanes: Vec::new(),
            ego: EgoTrajectory {
                speed: 0.0,
                yaw_rate: 0.0,
            },
            weather: Weather::Clear,
            time_of_day: TimeOfDay::Day,
            seed: 0,
        }
    }

    pub fn text_tokens(&self) -> Vec<u32> {
        let weather = match self.weather {
            Weather::Clear => vocab::CLEAR,
            Weather::Overcast => vocab::OVERCAST,
        };
        let tod = match self.time_of_day {
            TimeOfDay::Day => vocab::DAY,
            TimeOfDay::Dusk => vocab::DUSK,
        };
        let count = match self.primitives.len() {
            0..=3 => vocab::FEW,
            4..=6 => vocab::SEVERAL,
            _ => vocab::MANY,
        };
        vec![weather, tod, count]
    }

    /// Checks the structural invariants against a speed bound.
    pub fn validate(&self, max_speed: f64) -> Result<()> {
        if self.primitives.is_empty() {
            return Err(Error::config("scene needs at least one primitive"));
        }
        for (i, p) in self.primitives.iter().enumerate() {
            let bottom = p.center[1] + p.half_extent[1];
            if bottom > self.ground.height + 1e-9 {
                return Err(Error::config(format!("primitive {i} is below the ground plane")));
            }
            let speed = p.velocity.iter().map(|v| v * v).sum::<f64>().sqrt();
            if speed > max_speed + 1e-12 {
                return Err(Error::config(format!("primitive {i} speed {speed} exceeds {max_speed}")));
            }
        }
        Ok(())
    }
}

/// Bounds for procedural scene sampling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneComplexity {
    pub min_primitives: usize,
    pub max_primitives: usize,
    pub max_speed: f64,
    pub min_lanes: usize,
    pub max_lanes: usize,
    pub min_distance: f64,
    pub max_distance: f64,
    pub max_ego_speed: f64,
    pub max_ego_yaw_rate: f64,
    pub camera_height: f64,
}

impl Default for SceneComplexity {
    fn default() -> Self {
        Self {
            min_primitives: 3,
            max_primitives: 7,
            max_speed: 1.5,
            min_lanes: 1,
            max_lanes: 3,
            min_distance: 5.0,
            max_distance: 16.0,
            max_ego_speed: 1.0,
            max_ego_yaw_rate: 0.03,
            camera_height: 1.5,
        }
    }
}

impl SceneComplexity {
    pub fn validate(&self) -> Result<()> {
        if self.min_primitives < 1 || self.min_primitives > self.max_primitives {
            return Err(Error::config("primitive count range must satisfy 1 <= min <= max"));
        }
        if self.min_lanes > self.max_lanes {
            return Err(Error::config("lane count range must satisfy min <= max"));
        }
        if !(self.max_speed >= 0.0 && self.max_ego_speed >= 0.0) {
            return Err(Error::config("speed bounds must be non-negative"));
        }
        if !(self.min_distance > 1.0 && self.min_distance < self.max_distance) {
            return Err(Error::config("distance range must satisfy 1 < min < max"));
        }
        if !(self.camera_height > 0.0) {
            return Err(Error::config("camera height must be positive"));
        }
        Ok(())
    }
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

fn gray(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> [f64; 3] {
    let g = rng.random_range(lo..hi);
    let tint: f64 = rng.random_range(-0.03..0.03);
    [g + tint, g, g - tint]
}

/// Samples a scene; a pure function of `seed` and `complexity`.
pub fn sample_scene(seed: u64, complexity: &SceneComplexity) -> Result<SceneSpec> {
    complexity.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let weather = if rng.random_bool(0.5) { Weather::Clear } else { Weather::Overcast };
    let time_of_day = if rng.random_bool(0.7) { TimeOfDay::Day } else { TimeOfDay::Dusk };
    let sky_color = match (weather, time_of_day) {
        (Weather::Clear, TimeOfDay::Day) => [0.45, 0.65, 0.92],
        (Weather::Overcast, TimeOfDay::Day) => [0.72, 0.74, 0.78],
        (Weather::Clear, TimeOfDay::Dusk) => [0.85, 0.55, 0.40],
        (Weather::Overcast, TimeOfDay::Dusk) => [0.50, 0.45, 0.50],
    };
    let light_intensity = match time_of_day {
        TimeOfDay::Day => 0.75,
        TimeOfDay::Dusk => 0.5,
    };

    let ground_height = complexity.camera_height;
    let ground = GroundPlane {
        height: ground_height,
        color_a: gray(&mut rng, 0.30, 0.42),
        color_b: gray(&mut rng, 0.45, 0.55),
        tile_size: 4.0,
        lane_color: [0.92, 0.92, 0.85],
        lane_half_width: 0.2,
    };

    let n_prims = rng.random_range(complexity.min_primitives..=complexity.max_primitives);
    let mut primitives: Vec<Primitive> = Vec::with_capacity(n_prims);
    let mut attempts = 0;
    while primitives.len() < n_prims {
        attempts += 1;
        let is_box = rng.random_bool(0.55);
        let half_extent = if is_box {
            [rng.random_range(0.8..1.1), rng.random_range(0.6..0.9), rng.random_range(0.9..1.6)]
        } else {
            let r = rng.random_range(0.5..0.9);
            [r, r, r]
        };
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        let dist = rng.random_range(complexity.min_distance..complexity.max_distance);
        let center = [
            dist * angle.sin(),
            ground_height - half_extent[1],
            dist * angle.cos(),
        ];
        let speed = if rng.random_bool(0.6) {
            rng.random_range(0.0..=complexity.max_speed)
        } else {
            0.0
        };
        let heading = rng.random_range(0.0..std::f64::consts::TAU);
        let velocity = [speed * heading.sin(), 0.0, speed * heading.cos()];
        let hue = rng.random_range(0..6);
        let base = match hue {
            0 => [0.85, 0.2, 0.15],
            1 => [0.2, 0.7, 0.25],
            2 => [0.2, 0.3, 0.85],
            3 => [0.9, 0.8, 0.2],
            4 => [0.8, 0.35, 0.8],
            _ => [0.95, 0.95, 0.95],
        };
        let jitter: f64 = rng.random_range(0.85..1.0);
        let albedo = [base[0] * jitter, base[1] * jitter, base[2] * jitter];
        let candidate = Primitive {
            shape: if is_box { Shape::Box } else { Shape::Sphere },
            center,
            half_extent,
            albedo,
            velocity,
            class_id: if is_box { CLASS_VEHICLE } else { CLASS_PEDESTRIAN },
        };
        let clear = primitives.iter().all(|p| {
            let dx = p.center[0] - center[0];
            let dz = p.center[2] - center[2];
            let min_gap = p.half_extent[0].max(p.half_extent[2]) + half_extent[0].max(half_extent[2]) + 0.5;
            (dx * dx + dz * dz).sqrt() > min_gap * 1.5
        });
        if clear || attempts > 1000 {
            primitives.push(candidate);
        }
    }

    let n_lanes = rng.random_range(complexity.min_lanes..=complexity.max_lanes);
    let lane_offset: f64 = rng.random_range(-1.0..1.0);
    let lanes = (0..n_lanes)
        .map(|k| {
            let x = lane_offset + 3.5 * (k as f64 - (n_lanes as f64 - 1.0) / 2.0);
            (0..=8)
                .map(|i| [x, ground_height, -40.0 + 10.0 * i as f64])
                .collect()
        })
        .collect();

    let ego = EgoTrajectory {
        speed: rng.random_range(0.0..=complexity.max_ego_speed),
        yaw_rate: rng.random_range(-complexity.max_ego_yaw_rate..=complexity.max_ego_yaw_rate),
    };

    let scene = SceneSpec {
        primitives,
        ground,
        sky_color,
        light_dir: normalize([0.4, 1.0, 0.6]),
        light_intensity,
        ambient: 0.35,
        draw_distance: 45.0,
        lanes,
        ego,
        weather,
        time_of_day,
        seed,
    };
    scene.validate(complexity.max_speed)?;
    Ok(scene)
}
