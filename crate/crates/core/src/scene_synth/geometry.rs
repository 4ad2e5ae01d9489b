//! Analytic ray intersection against the ground plane and yaw-rotated boxes.

use super::{Cuboid, ObjectClass, SceneFrame};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum HitKind {
    Ground,
    Box { index: usize, class: ObjectClass },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub distance: f64,
    pub kind: HitKind,
}

const T_MIN: f64 = 1e-9;

/// Smallest positive ray parameter at which a world-frame ray meets the box.
pub(crate) fn ray_box(origin: [f64; 3], dir: [f64; 3], b: &Cuboid) -> Option<f64> {
    let (s, c) = b.yaw.sin_cos();
    let rel = [origin[0] - b.center[0], origin[1] - b.center[1], origin[2] - b.center[2]];
    let o = [c * rel[0] + s * rel[1], -s * rel[0] + c * rel[1], rel[2]];
    let d = [c * dir[0] + s * dir[1], -s * dir[0] + c * dir[1], dir[2]];
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    for a in 0..3 {
        let h = 0.5 * b.size[a];
        if d[a] == 0.0 {
            if o[a] < -h || o[a] > h {
                return None;
            }
            continue;
        }
        let inv = 1.0 / d[a];
        let (mut t0, mut t1) = ((-h - o[a]) * inv, (h - o[a]) * inv);
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
        }
        t_near = t_near.max(t0);
        t_far = t_far.min(t1);
        if t_near > t_far {
            return None;
        }
    }
    if t_near > T_MIN {
        Some(t_near)
    } else if t_far > T_MIN {
        Some(t_far)
    } else {
        None
    }
}

pub(crate) fn ray_ground(origin: [f64; 3], dir: [f64; 3], ground_z: f64) -> Option<f64> {
    if dir[2] >= 0.0 {
        return None;
    }
    let t = (ground_z - origin[2]) / dir[2];
    (t > T_MIN).then_some(t)
}

fn closer(best: Option<Hit>, cand: Hit) -> Option<Hit> {
    match best {
        Some(b) if b.distance <= cand.distance => Some(b),
        _ => Some(cand),
    }
}

/// Nearest intersection within `max_range`. Boxes whose bounding sphere
/// cannot be reached before the current best hit are skipped.
pub fn cast_ray(frame: &SceneFrame, origin: [f64; 3], dir: [f64; 3], max_range: f64) -> Option<Hit> {
    let mut best = ray_ground(origin, dir, frame.ground_z).map(|t| Hit {
        distance: t,
        kind: HitKind::Ground,
    });
    for (index, b) in frame.boxes.iter().enumerate() {
        let rel = [b.center[0] - origin[0], b.center[1] - origin[1], b.center[2] - origin[2]];
        let along = rel[0] * dir[0] + rel[1] * dir[1] + rel[2] * dir[2];
        let radius = 0.5 * (b.size[0] * b.size[0] + b.size[1] * b.size[1] + b.size[2] * b.size[2]).sqrt();
        let dist2 = rel[0] * rel[0] + rel[1] * rel[1] + rel[2] * rel[2];
        let perp2 = dist2 - along * along;
        if perp2 > radius * radius * (1.0 + 1e-9) + 1e-9 {
            continue;
        }
        if along + radius < 0.0 {
            continue;
        }
        if let Some(cur) = best {
            if along - radius > cur.distance {
                continue;
            }
        }
        if let Some(t) = ray_box(origin, dir, b) {
            best = closer(
                best,
                Hit {
                    distance: t,
                    kind: HitKind::Box { index, class: b.class },
                },
            );
        }
    }
    best.filter(|h| h.distance <= max_range)
}

/// Tests every primitive without culling; the reference for [`cast_ray`].
pub fn cast_ray_brute_force(
    frame: &SceneFrame,
    origin: [f64; 3],
    dir: [f64; 3],
    max_range: f64,
) -> Option<Hit> {
    let mut best = None;
    if let Some(t) = ray_ground(origin, dir, frame.ground_z) {
        best = closer(best, Hit { distance: t, kind: HitKind::Ground });
    }
    for (index, b) in frame.boxes.iter().enumerate() {
        if let Some(t) = ray_box(origin, dir, b) {
            best = closer(best, Hit { distance: t, kind: HitKind::Box { index, class: b.class } });
        }
    }
    best.filter(|h| h.distance <= max_range)
}
