//! Deterministic procedural driving scenes with exact ray-castable geometry.
//!
//! World frame: `z` up, ground plane at `ground_z`. The ego (sensor) frame is
//! centred on the sensor, `x` forward, `y` left, `z` up; the sensor sits
//! `sensor_height` metres above the ground.

mod camera;
mod caption;
mod dataset;
mod geometry;
mod lidar;

pub use camera::{render_camera_views, surround_cameras, CameraConfig, FeatureMap};
pub use caption::{caption_scene, caption_words, direction_word, QAPair, TemplateId, ALL_TEMPLATES};
pub use dataset::{
    generate_dataset, load_dataset, read_dataset, save_dataset, write_dataset, Dataset, SequenceRecord, DATASET_MAGIC,
    DATASET_VERSION,
};
pub use geometry::{cast_ray, cast_ray_brute_force, Hit, HitKind};
pub use lidar::{cast_lidar, RayBundle, RayPatternConfig, NO_HIT};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ObjectClass {
    Car,
    Truck,
    Pedestrian,
}

impl ObjectClass {
    pub const ALL: [ObjectClass; 3] = [ObjectClass::Car, ObjectClass::Truck, ObjectClass::Pedestrian];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// Nominal (length, width, height) in metres.
    pub fn size(self) -> [f64; 3] {
        match self {
            ObjectClass::Car => [4.5, 2.0, 1.6],
            ObjectClass::Truck => [8.0, 2.6, 3.0],
            ObjectClass::Pedestrian => [1.0, 1.0, 1.8],
        }
    }

    pub fn word(self) -> &'static str {
        match self {
            ObjectClass::Car => "car",
            ObjectClass::Truck => "truck",
            ObjectClass::Pedestrian => "pedestrian",
        }
    }

    pub fn plural(self) -> &'static str {
        match self {
            ObjectClass::Car => "cars",
            ObjectClass::Truck => "trucks",
            ObjectClass::Pedestrian => "pedestrians",
        }
    }
}

/// Planar rigid transform of the ego vehicle in the world.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

impl Pose2 {
    /// World point → frame of this pose (planar part only; `z` passes through).
    pub fn to_local(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        let (dx, dy) = (p[0] - self.x, p[1] - self.y);
        [c * dx + s * dy, -s * dx + c * dy, p[2]]
    }

    pub fn to_world(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        [self.x + c * p[0] - s * p[1], self.y + s * p[0] + c * p[1], p[2]]
    }

    pub fn rotate_to_world(&self, d: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        [c * d[0] - s * d[1], s * d[0] + c * d[1], d[2]]
    }
}

/// Yaw-rotated cuboid resting on the ground.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cuboid {
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
    /// World-frame planar velocity, m/s.
    pub velocity: [f64; 2],
    pub class: ObjectClass,
}

impl Cuboid {
    pub fn footprint_radius(&self) -> f64 {
        0.5 * (self.size[0].hypot(self.size[1]))
    }

    pub fn is_dynamic(&self) -> bool {
        self.velocity != [0.0, 0.0]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneFrame {
    pub ego_pose: Pose2,
    pub boxes: Vec<Cuboid>,
    pub ground_z: f64,
}

impl SceneFrame {
    /// Box centres in this frame's ego (sensor) coordinates.
    pub fn boxes_in_ego(&self, sensor_height: f64) -> Vec<(Cuboid, [f64; 3])> {
        self.boxes
            .iter()
            .map(|b| {
                let mut p = self.ego_pose.to_local(b.center);
                p[2] -= self.ground_z + sensor_height;
                (*b, p)
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSequence {
    pub frames: Vec<SceneFrame>,
    pub dt_seconds: f64,
    pub seed: u64,
}

/// Motion of the ego from frame `t` to frame `t + horizon_index`, expressed
/// in the frame-`t` ego coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct EgoMotion {
    pub delta_position: [f64; 2],
    pub delta_yaw: f64,
    pub horizon_index: usize,
}

impl EgoMotion {
    pub fn between(from: &Pose2, to: &Pose2, horizon_index: usize) -> Self {
        let p = from.to_local([to.x, to.y, 0.0]);
        let mut dyaw = to.yaw - from.yaw;
        dyaw = (dyaw + std::f64::consts::PI).rem_euclid(2.0 * std::f64::consts::PI) - std::f64::consts::PI;
        Self {
            delta_position: [p[0], p[1]],
            delta_yaw: dyaw,
            horizon_index,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.delta_position.iter().all(|v| v.is_finite()) && self.delta_yaw.is_finite()
    }
}

impl SceneSequence {
    /// Ego motions from frame `t` to each of the next `horizon` frames.
    pub fn ego_motions(&self, t: usize, horizon: usize) -> Vec<EgoMotion> {
        (1..=horizon)
            .map(|i| EgoMotion::between(&self.frames[t].ego_pose, &self.frames[t + i].ego_pose, i))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub static_boxes: usize,
    pub dynamic_boxes: usize,
    /// Half-width of the square region boxes are scattered over, metres.
    pub extent: f64,
    pub frames: usize,
    pub dt_seconds: f64,
    pub ego_speed: (f64, f64),
    /// Bound on |yaw rate|, rad/s.
    pub max_turn_rate: f64,
    pub agent_speed: (f64, f64),
    /// Keep-out radius around the ego position in every frame.
    pub ego_clearance: f64,
    pub ground_z: f64,
    /// Extra boxes placed verbatim at frame 0 (world frame), after the random ones.
    pub scripted_boxes: Vec<Cuboid>,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            static_boxes: 6,
            dynamic_boxes: 3,
            extent: 32.0,
            frames: 5,
            dt_seconds: 1.0,
            ego_speed: (0.0, 5.0),
            max_turn_rate: 0.15,
            agent_speed: (0.5, 3.0),
            ego_clearance: 3.5,
            ground_z: 0.0,
            scripted_boxes: Vec::new(),
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames < 4 {
            return Err(Error::Config(format!("frame count {} < 4", self.frames)));
        }
        let largest = ObjectClass::ALL
            .iter()
            .map(|c| c.size())
            .chain(self.scripted_boxes.iter().map(|b| b.size))
            .flat_map(|s| s.into_iter())
            .fold(0.0, f64::max);
        if !(self.extent >= 2.0 * largest) {
            return Err(Error::Config(format!(
                "world extent {} is smaller than twice the largest box ({largest} m)",
                self.extent
            )));
        }
        if !(self.dt_seconds > 0.0) || self.ego_speed.0 > self.ego_speed.1 || self.agent_speed.0 > self.agent_speed.1 {
            return Err(Error::Config("invalid timing or speed range".into()));
        }
        Ok(())
    }
}

/// Generates a sequence; identical `(config, seed)` give bit-identical output.
pub fn generate_scene(config: &SceneConfig, seed: u64) -> Result<SceneSequence> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dt = config.dt_seconds;

    let speed = rng.gen_range(config.ego_speed.0..=config.ego_speed.1);
    let mut poses = Vec::with_capacity(config.frames);
    let mut pose = Pose2 {
        x: 0.0,
        y: 0.0,
        yaw: rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
    };
    let mut turn = rng.gen_range(-config.max_turn_rate..=config.max_turn_rate);
    for _ in 0..config.frames {
        poses.push(pose);
        if rng.gen_bool(0.3) {
            turn = rng.gen_range(-config.max_turn_rate..=config.max_turn_rate);
        }
        let heading = pose.yaw + 0.5 * turn * dt;
        pose = Pose2 {
            x: pose.x + speed * dt * heading.cos(),
            y: pose.y + speed * dt * heading.sin(),
            yaw: pose.yaw + turn * dt,
        };
    }
    let cx = poses.iter().map(|p| p.x).sum::<f64>() / poses.len() as f64;
    let cy = poses.iter().map(|p| p.y).sum::<f64>() / poses.len() as f64;

    let mut boxes: Vec<Cuboid> = Vec::new();
    let clear_of_ego = |b: &Cuboid| {
        (0..config.frames).all(|f| {
            let t = f as f64 * dt;
            let (bx, by) = (b.center[0] + b.velocity[0] * t, b.center[1] + b.velocity[1] * t);
            let p = &poses[f];
            (bx - p.x).hypot(by - p.y) > config.ego_clearance + b.footprint_radius()
        })
    };
    let total = config.static_boxes + config.dynamic_boxes;
    for k in 0..total {
        let dynamic = k >= config.static_boxes;
        for _attempt in 0..64 {
            let class = ObjectClass::ALL[rng.gen_range(0..ObjectClass::ALL.len())];
            let size = class.size();
            let r = 0.9 * config.extent;
            let center = [
                cx + rng.gen_range(-r..r),
                cy + rng.gen_range(-r..r),
                config.ground_z + 0.5 * size[2],
            ];
            let yaw = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
            let velocity = if dynamic {
                let s = rng.gen_range(config.agent_speed.0..=config.agent_speed.1);
                [s * yaw.cos(), s * yaw.sin()]
            } else {
                [0.0, 0.0]
            };
            let cand = Cuboid {
                center,
                size,
                yaw,
                velocity,
                class,
            };
            let separated = boxes.iter().all(|o| {
                (o.center[0] - center[0]).hypot(o.center[1] - center[1])
                    > o.footprint_radius() + cand.footprint_radius() + 0.5
            });
            if separated && clear_of_ego(&cand) {
                boxes.push(cand);
                break;
            }
        }
    }
    boxes.extend(config.scripted_boxes.iter().copied());

    let frames = poses
        .iter()
        .enumerate()
        .map(|(f, &ego_pose)| {
            let t = f as f64 * dt;
            SceneFrame {
                ego_pose,
                ground_z: config.ground_z,
                boxes: boxes
                    .iter()
                    .map(|b| Cuboid {
                        center: [
                            b.center[0] + b.velocity[0] * t,
                            b.center[1] + b.velocity[1] * t,
                            b.center[2],
                        ],
                        ..*b
                    })
                    .collect(),
            }
        })
        .collect();
    Ok(SceneSequence {
        frames,
        dt_seconds: dt,
        seed,
    })
}
