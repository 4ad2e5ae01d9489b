//! Pinhole pseudo-cameras that rasterize range and class one-hot channels.

use super::geometry::{cast_ray, HitKind};
use super::lidar::normalize;
use super::{ObjectClass, SceneFrame};
use crate::error::{Error, Result};

/// Camera axes follow the usual convention: `x` right, `y` down, `z` forward.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraConfig {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Camera-to-ego rotation; columns are the camera axes in ego coordinates.
    pub rotation: [[f64; 3]; 3],
    /// Camera centre in the ego (sensor) frame.
    pub translation: [f64; 3],
    pub max_range: f64,
}

impl CameraConfig {
    /// Level camera looking along `yaw` with the given horizontal field of view.
    pub fn looking(yaw: f64, width: usize, height: usize, hfov_deg: f64, max_range: f64) -> Self {
        let fx = 0.5 * width as f64 / (0.5 * hfov_deg.to_radians()).tan();
        let (s, c) = yaw.sin_cos();
        let x_axis = [s, -c, 0.0];
        let y_axis = [0.0, 0.0, -1.0];
        let z_axis = [c, s, 0.0];
        Self {
            width,
            height,
            fx,
            fy: fx,
            cx: 0.5 * width as f64,
            cy: 0.5 * height as f64,
            rotation: [
                [x_axis[0], y_axis[0], z_axis[0]],
                [x_axis[1], y_axis[1], z_axis[1]],
                [x_axis[2], y_axis[2], z_axis[2]],
            ],
            translation: [0.0, 0.0, 0.0],
            max_range,
        }
    }

    pub fn channels() -> usize {
        1 + ObjectClass::ALL.len()
    }

    /// Ego-from-camera inverse. Fails when the rotation block is singular.
    pub fn ego_to_camera(&self) -> Result<[[f64; 3]; 3]> {
        let m = self.rotation;
        let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
        if !det.is_finite() || det.abs() < 1e-9 {
            return Err(Error::Calibration(format!("extrinsic rotation is singular (det {det:e})")));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Calibration("focal lengths must be positive".into()));
        }
        let inv = 1.0 / det;
        let mut r = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                let (a, b) = ((j + 1) % 3, (j + 2) % 3);
                let (c, d) = ((i + 1) % 3, (i + 2) % 3);
                r[i][j] = (m[a][c] * m[b][d] - m[a][d] * m[b][c]) * inv;
            }
        }
        Ok(r)
    }

    /// Projects an ego-frame point to `(u, v, range)`; `None` if behind the camera.
    pub fn project(&self, inv: &[[f64; 3]; 3], p: [f64; 3]) -> Option<(f64, f64, f64)> {
        let rel = [
            p[0] - self.translation[0],
            p[1] - self.translation[1],
            p[2] - self.translation[2],
        ];
        let pc: Vec<f64> = (0..3).map(|i| (0..3).map(|j| inv[i][j] * rel[j]).sum()).collect();
        if pc[2] <= 1e-6 {
            return None;
        }
        let u = self.fx * pc[0] / pc[2] + self.cx;
        let v = self.fy * pc[1] / pc[2] + self.cy;
        let range = (rel[0] * rel[0] + rel[1] * rel[1] + rel[2] * rel[2]).sqrt();
        Some((u, v, range))
    }

    fn pixel_ray(&self, u: usize, v: usize) -> [f64; 3] {
        let dc = normalize([
            (u as f64 + 0.5 - self.cx) / self.fx,
            (v as f64 + 0.5 - self.cy) / self.fy,
            1.0,
        ]);
        let r = self.rotation;
        [
            r[0][0] * dc[0] + r[0][1] * dc[1] + r[0][2] * dc[2],
            r[1][0] * dc[0] + r[1][1] * dc[1] + r[1][2] * dc[2],
            r[2][0] * dc[0] + r[2][1] * dc[1] + r[2][2] * dc[2],
        ]
    }
}

/// Four level cameras at the sensor looking front, left, back and right.
pub fn surround_cameras(width: usize, height: usize, max_range: f64) -> Vec<CameraConfig> {
    (0..4)
        .map(|k| CameraConfig::looking(k as f64 * std::f64::consts::FRAC_PI_2, width, height, 90.0, max_range))
        .collect()
}

/// Channel-major `[channels, height, width]` image features.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn at(&self, c: usize, v: usize, u: usize) -> f64 {
        self.data[(c * self.height + v) * self.width + u]
    }

    pub fn set(&mut self, c: usize, v: usize, u: usize, x: f64) {
        self.data[(c * self.height + v) * self.width + u] = x;
    }
}

/// Channel 0 holds range / max_range (0 for sky); channels `1..` hold the
/// one-hot class of the box hit by the pixel ray.
pub fn render_camera_views(
    frame: &SceneFrame,
    cameras: &[CameraConfig],
    sensor_height: f64,
) -> Vec<FeatureMap> {
    let pose = frame.ego_pose;
    cameras
        .iter()
        .map(|cam| {
            let mut map = FeatureMap::zeros(CameraConfig::channels(), cam.height, cam.width);
            let mut origin = pose.to_world(cam.translation);
            origin[2] = frame.ground_z + sensor_height + cam.translation[2];
            for v in 0..cam.height {
                for u in 0..cam.width {
                    let d = pose.rotate_to_world(cam.pixel_ray(u, v));
                    if let Some(hit) = cast_ray(frame, origin, d, cam.max_range) {
                        map.set(0, v, u, hit.distance / cam.max_range);
                        if let HitKind::Box { class, .. } = hit.kind {
                            map.set(1 + class.index(), v, u, 1.0);
                        }
                    }
                }
            }
            map
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene_synth::{Cuboid, Pose2};

    fn frame(boxes: Vec<Cuboid>) -> SceneFrame {
        SceneFrame {
            ego_pose: Pose2 { x: 3.0, y: -2.0, yaw: 0.4 },
            boxes,
            ground_z: 0.0,
        }
    }

    #[test]
    fn empty_scene_is_ground_and_sky_only() {
        let cams = surround_cameras(16, 8, 60.0);
        for map in render_camera_views(&frame(vec![]), &cams, 1.0) {
            for v in 0..map.height {
                for u in 0..map.width {
                    for c in 1..map.channels {
                        assert_eq!(map.at(c, v, u), 0.0);
                    }
                    let below_horizon = (v as f64 + 0.5) > 0.5 * map.height as f64;
                    assert_eq!(map.at(0, v, u) > 0.0, below_horizon, "pixel {u},{v}");
                }
            }
        }
    }

    #[test]
    fn centred_box_is_a_contiguous_class_block() {
        let f = frame(vec![]);
        let ahead = f.ego_pose.to_world([8.0, 0.0, 0.0]);
        let b = Cuboid {
            center: [ahead[0], ahead[1], 1.0],
            size: [2.0, 2.0, 2.0],
            yaw: f.ego_pose.yaw,
            velocity: [0.0, 0.0],
            class: ObjectClass::Truck,
        };
        let f = frame(vec![b]);
        let cams = surround_cameras(32, 16, 60.0);
        let maps = render_camera_views(&f, &cams, 1.0);
        let front = &maps[0];
        let ch = 1 + ObjectClass::Truck.index();
        assert_eq!(front.at(ch, 8, 16), 1.0);
        for v in 0..front.height {
            let cols: Vec<usize> = (0..front.width).filter(|&u| front.at(ch, v, u) == 1.0).collect();
            if let (Some(&a), Some(&z)) = (cols.first(), cols.last()) {
                assert_eq!(cols.len(), z - a + 1, "row {v} not contiguous");
            }
        }
        for other in &maps[1..] {
            assert!(other.data.iter().skip(other.height * other.width).all(|&x| x == 0.0));
        }
        assert_eq!(maps, render_camera_views(&f, &cams, 1.0));
    }

    #[test]
    fn projection_round_trips_pixel_rays() {
        let cam = CameraConfig::looking(1.1, 20, 10, 90.0, 60.0);
        let inv = cam.ego_to_camera().unwrap();
        let d = cam.pixel_ray(4, 7);
        let (u, v, r) = cam.project(&inv, [5.0 * d[0], 5.0 * d[1], 5.0 * d[2]]).unwrap();
        assert!((u - 4.5).abs() < 1e-9 && (v - 7.5).abs() < 1e-9 && (r - 5.0).abs() < 1e-9);
    }

    #[test]
    fn singular_extrinsics_rejected() {
        let mut cam = CameraConfig::looking(0.0, 8, 8, 90.0, 60.0);
        cam.rotation = [[1.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(matches!(cam.ego_to_camera(), Err(Error::Calibration(_))));
    }
}
