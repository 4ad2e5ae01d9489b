use super::geometry::cast_ray;
use super::SceneFrame;

/// Depth sentinel for rays without a return inside the maximum range.
pub const NO_HIT: f64 = f64::INFINITY;

#[derive(Clone, Debug, PartialEq)]
pub struct RayPatternConfig {
    pub elevation_steps: usize,
    pub azimuth_steps: usize,
    pub elevation_min_deg: f64,
    pub elevation_max_deg: f64,
    pub max_range: f64,
    pub sensor_height: f64,
}

impl Default for RayPatternConfig {
    fn default() -> Self {
        Self {
            elevation_steps: 32,
            azimuth_steps: 256,
            elevation_min_deg: -30.0,
            elevation_max_deg: 10.0,
            max_range: 60.0,
            sensor_height: 1.0,
        }
    }
}

impl RayPatternConfig {
    /// Unit directions in the sensor frame, elevation-major.
    pub fn directions(&self) -> Vec<[f64; 3]> {
        let mut dirs = Vec::with_capacity(self.elevation_steps * self.azimuth_steps);
        for e in 0..self.elevation_steps {
            let frac = if self.elevation_steps == 1 {
                0.5
            } else {
                e as f64 / (self.elevation_steps - 1) as f64
            };
            let el = (self.elevation_min_deg + frac * (self.elevation_max_deg - self.elevation_min_deg)).to_radians();
            for a in 0..self.azimuth_steps {
                let az = 2.0 * std::f64::consts::PI * a as f64 / self.azimuth_steps as f64;
                dirs.push(unit_direction(az, el));
            }
        }
        dirs
    }
}

pub(crate) fn unit_direction(azimuth: f64, elevation: f64) -> [f64; 3] {
    let (se, ce) = elevation.sin_cos();
    let (sa, ca) = azimuth.sin_cos();
    normalize([ce * ca, ce * sa, se])
}

pub(crate) fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

/// LiDAR sweep in the sensor frame of one scene frame.
#[derive(Clone, Debug, PartialEq)]
pub struct RayBundle {
    pub origin: [f64; 3],
    pub directions: Vec<[f64; 3]>,
    /// Metres along the ray, or [`NO_HIT`].
    pub gt_depths: Vec<f64>,
}

impl RayBundle {
    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }

    pub fn is_hit(&self, k: usize) -> bool {
        self.gt_depths[k].is_finite()
    }

    pub fn hit_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&k| self.is_hit(k)).collect()
    }

    /// Ground-truth returns as sensor-frame points.
    pub fn points(&self) -> Vec<[f64; 3]> {
        self.hit_indices()
            .into_iter()
            .map(|k| {
                let (d, t) = (self.gt_depths[k], self.directions[k]);
                [
                    self.origin[0] + d * t[0],
                    self.origin[1] + d * t[1],
                    self.origin[2] + d * t[2],
                ]
            })
            .collect()
    }

    pub fn subset(&self, indices: &[usize]) -> RayBundle {
        RayBundle {
            origin: self.origin,
            directions: indices.iter().map(|&k| self.directions[k]).collect(),
            gt_depths: indices.iter().map(|&k| self.gt_depths[k]).collect(),
        }
    }
}

/// Casts the configured pattern from the frame's sensor position.
pub fn cast_lidar(frame: &SceneFrame, pattern: &RayPatternConfig) -> RayBundle {
    let pose = frame.ego_pose;
    let origin_world = [pose.x, pose.y, frame.ground_z + pattern.sensor_height];
    let directions = pattern.directions();
    let gt_depths = directions
        .iter()
        .map(|&d| {
            cast_ray(frame, origin_world, pose.rotate_to_world(d), pattern.max_range)
                .map_or(NO_HIT, |h| h.distance)
        })
        .collect();
    RayBundle {
        origin: [0.0, 0.0, 0.0],
        directions,
        gt_depths,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene_synth::geometry::cast_ray_brute_force;
    use crate::scene_synth::{generate_scene, Cuboid, ObjectClass, Pose2, SceneConfig};

    fn empty_frame() -> SceneFrame {
        SceneFrame {
            ego_pose: Pose2::default(),
            boxes: vec![],
            ground_z: 0.0,
        }
    }

    fn single_ray(el_deg: f64, height: f64) -> RayPatternConfig {
        RayPatternConfig {
            elevation_steps: 1,
            azimuth_steps: 1,
            elevation_min_deg: el_deg,
            elevation_max_deg: el_deg,
            max_range: 60.0,
            sensor_height: height,
        }
    }

    #[test]
    fn ray_hits_box_face_at_five() {
        let mut f = empty_frame();
        f.boxes.push(Cuboid {
            center: [6.0, 0.0, 1.0],
            size: [2.0, 2.0, 2.0],
            yaw: 0.0,
            velocity: [0.0, 0.0],
            class: ObjectClass::Car,
        });
        let b = cast_lidar(&f, &single_ray(0.0, 1.0));
        assert_eq!(b.gt_depths[0], 5.0);
    }

    #[test]
    fn upward_ray_in_empty_scene_misses() {
        let b = cast_lidar(&empty_frame(), &single_ray(90.0, 1.0));
        assert_eq!(b.gt_depths[0], NO_HIT);
        assert!(b.hit_indices().is_empty());
    }

    #[test]
    fn downward_45_degrees_from_two_metres() {
        let b = cast_lidar(&empty_frame(), &single_ray(-45.0, 2.0));
        assert!((b.gt_depths[0] - 2.0 * 2f64.sqrt()).abs() < 1e-12);
        assert!((b.gt_depths[0] - 2.828427).abs() < 1e-6);
    }

    #[test]
    fn empty_scene_hits_only_ground() {
        let cfg = SceneConfig {
            static_boxes: 0,
            dynamic_boxes: 0,
            ..Default::default()
        };
        let seq = generate_scene(&cfg, 7).unwrap();
        let pattern = RayPatternConfig::default();
        let b = cast_lidar(&seq.frames[0], &pattern);
        for (k, d) in b.directions.iter().enumerate() {
            if d[2] < 0.0 && pattern.sensor_height / -d[2] <= pattern.max_range {
                assert!((b.gt_depths[k] - pattern.sensor_height / -d[2]).abs() < 1e-9);
            } else {
                assert_eq!(b.gt_depths[k], NO_HIT);
            }
        }
        for p in b.points() {
            assert!((p[2] + pattern.sensor_height).abs() < 1e-9);
        }
    }

    #[test]
    fn directions_are_unit() {
        for d in RayPatternConfig::default().directions() {
            let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            assert!((n - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn culled_caster_equals_brute_force() {
        let pattern = RayPatternConfig {
            elevation_steps: 12,
            azimuth_steps: 96,
            ..Default::default()
        };
        for seed in 0..8 {
            let seq = generate_scene(&SceneConfig::default(), seed).unwrap();
            for frame in &seq.frames {
                let o = [frame.ego_pose.x, frame.ego_pose.y, frame.ground_z + pattern.sensor_height];
                for d in pattern.directions() {
                    let dw = frame.ego_pose.rotate_to_world(d);
                    let fast = cast_ray(frame, o, dw, pattern.max_range);
                    let slow = cast_ray_brute_force(frame, o, dw, pattern.max_range);
                    assert_eq!(fast, slow);
                }
            }
        }
    }
}
