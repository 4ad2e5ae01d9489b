//! Templated instruction/answer pairs computed exactly from scene state.

use super::{ObjectClass, SceneFrame};

#[derive(Clone, Debug, PartialEq)]
pub struct QAPair {
    pub instruction: String,
    pub answer: String,
    pub frame_index: usize,
    pub template: TemplateId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TemplateId {
    Counting(ObjectClass),
    NearestObject,
    RelativePosition(ObjectClass),
    EgoManeuver,
}

pub const ALL_TEMPLATES: [TemplateId; 8] = [
    TemplateId::Counting(ObjectClass::Car),
    TemplateId::Counting(ObjectClass::Truck),
    TemplateId::Counting(ObjectClass::Pedestrian),
    TemplateId::NearestObject,
    TemplateId::RelativePosition(ObjectClass::Car),
    TemplateId::RelativePosition(ObjectClass::Truck),
    TemplateId::RelativePosition(ObjectClass::Pedestrian),
    TemplateId::EgoManeuver,
];

impl TemplateId {
    pub fn code(self) -> u8 {
        match self {
            TemplateId::Counting(c) => c.index() as u8,
            TemplateId::NearestObject => 3,
            TemplateId::RelativePosition(c) => 4 + c.index() as u8,
            TemplateId::EgoManeuver => 7,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        ALL_TEMPLATES.get(code as usize).copied()
    }
}

/// Corridor ahead of the ego checked by the maneuver template.
const CORRIDOR_LENGTH: f64 = 15.0;
const CORRIDOR_HALF_WIDTH: f64 = 3.0;

/// Direction bucket of an ego-frame planar offset.
pub fn direction_word(x: f64, y: f64) -> &'static str {
    let a = y.atan2(x);
    let q = std::f64::consts::FRAC_PI_4;
    if a.abs() <= q {
        "ahead"
    } else if a > q && a <= 3.0 * q {
        "left"
    } else if a < -q && a >= -3.0 * q {
        "right"
    } else {
        "behind"
    }
}

/// Every word a template can emit, in a fixed order.
pub fn caption_words() -> Vec<&'static str> {
    let mut w = vec![
        "how", "many", "are", "in", "the", "scene", "what", "is", "nearest", "object", "where",
        "can", "ego", "vehicle", "keep", "going", "straight", "yes", "no", "none", "ahead",
        "behind", "left", "right",
    ];
    for c in ObjectClass::ALL {
        w.push(c.word());
        w.push(c.plural());
    }
    w.extend(["0", "1", "2", "3", "4", "5", "6", "7", "8", "9", "10", "11", "12"]);
    w
}

/// Builds the instruction and its exact answer for one frame.
///
/// Only boxes whose centre lies inside the square `|x|, |y| <= region` of the
/// ego frame are considered.
pub fn caption_scene(frame: &SceneFrame, frame_index: usize, template: TemplateId, region: f64) -> QAPair {
    let (instruction, answer) = instruction_and_answer(frame, template, region);
    QAPair {
        instruction,
        answer,
        frame_index,
        template,
    }
}

fn instruction_and_answer(frame: &SceneFrame, template: TemplateId, region: f64) -> (String, String) {
    let visible: Vec<(ObjectClass, f64, f64)> = frame
        .boxes
        .iter()
        .map(|b| {
            let p = frame.ego_pose.to_local(b.center);
            (b.class, p[0], p[1])
        })
        .filter(|&(_, x, y)| x.abs() <= region && y.abs() <= region)
        .collect();
    let nearest = |filter: Option<ObjectClass>| {
        visible
            .iter()
            .filter(|(c, _, _)| filter.is_none_or(|f| f == *c))
            .min_by(|a, b| a.1.hypot(a.2).total_cmp(&b.1.hypot(b.2)))
            .copied()
    };
    match template {
        TemplateId::Counting(class) => (
            format!("how many {} are in the scene", class.plural()),
            visible.iter().filter(|(c, _, _)| *c == class).count().min(12).to_string(),
        ),
        TemplateId::NearestObject => (
            "what is the nearest object".to_string(),
            match nearest(None) {
                Some((c, x, y)) => format!("{} {}", c.word(), direction_word(x, y)),
                None => "none".to_string(),
            },
        ),
        TemplateId::RelativePosition(class) => (
            format!("where is the nearest {}", class.word()),
            match nearest(Some(class)) {
                Some((_, x, y)) => direction_word(x, y).to_string(),
                None => "none".to_string(),
            },
        ),
        TemplateId::EgoManeuver => {
            let blocked = visible
                .iter()
                .any(|&(_, x, y)| x > 0.0 && x <= CORRIDOR_LENGTH && y.abs() <= CORRIDOR_HALF_WIDTH);
            (
                "can the ego vehicle keep going straight".to_string(),
                if blocked { "no" } else { "yes" }.to_string(),
            )
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene_synth::{generate_scene, Cuboid, Pose2, SceneConfig};

    fn boxed(class: ObjectClass, x: f64, y: f64) -> Cuboid {
        Cuboid {
            center: [x, y, 0.8],
            size: class.size(),
            yaw: 0.0,
            velocity: [0.0, 0.0],
            class,
        }
    }

    fn frame(boxes: Vec<Cuboid>) -> SceneFrame {
        SceneFrame {
            ego_pose: Pose2::default(),
            boxes,
            ground_z: 0.0,
        }
    }

    #[test]
    fn counts_cars() {
        let f = frame(vec![
            boxed(ObjectClass::Car, 10.0, 0.0),
            boxed(ObjectClass::Car, -10.0, 5.0),
            boxed(ObjectClass::Truck, 0.0, 12.0),
            boxed(ObjectClass::Car, 3.0, -20.0),
        ]);
        assert_eq!(caption_scene(&f, 0, TemplateId::Counting(ObjectClass::Car), 32.0).answer, "3");
    }

    #[test]
    fn empty_scene_answers() {
        let f = frame(vec![]);
        assert_eq!(caption_scene(&f, 0, TemplateId::Counting(ObjectClass::Car), 32.0).answer, "0");
        assert_eq!(caption_scene(&f, 0, TemplateId::NearestObject, 32.0).answer, "none");
        assert_eq!(caption_scene(&f, 0, TemplateId::EgoManeuver, 32.0).answer, "yes");
    }

    #[test]
    fn nearest_ahead() {
        let f = frame(vec![
            boxed(ObjectClass::Truck, 4.0, 0.0),
            boxed(ObjectClass::Car, 0.0, -9.0),
        ]);
        let QAPair { instruction: q, answer: a, .. } = caption_scene(&f, 0, TemplateId::NearestObject, 32.0);
        assert_eq!(q, "what is the nearest object");
        assert_eq!(a, "truck ahead");
        assert_eq!(caption_scene(&f, 0, TemplateId::RelativePosition(ObjectClass::Car), 32.0).answer, "right");
        assert_eq!(caption_scene(&f, 0, TemplateId::EgoManeuver, 32.0).answer, "no");
    }

    /// Re-derives answers with dot products instead of `atan2`.
    fn independent_direction(x: f64, y: f64) -> &'static str {
        if x >= y.abs() {
            "ahead"
        } else if -x >= y.abs() {
            "behind"
        } else if y > 0.0 {
            "left"
        } else {
            "right"
        }
    }

    #[test]
    fn answers_rederive_from_scene_state() {
        let words = caption_words();
        for seed in 0..30 {
            let seq = generate_scene(&SceneConfig::default(), seed).unwrap();
            for f in &seq.frames {
                let (s, c) = f.ego_pose.yaw.sin_cos();
                let local: Vec<(ObjectClass, f64, f64)> = f
                    .boxes
                    .iter()
                    .map(|b| {
                        let (dx, dy) = (b.center[0] - f.ego_pose.x, b.center[1] - f.ego_pose.y);
                        (b.class, c * dx + s * dy, -s * dx + c * dy)
                    })
                    .filter(|(_, x, y)| x.abs() <= 32.0 && y.abs() <= 32.0)
                    .collect();
                for t in ALL_TEMPLATES {
                    let QAPair { instruction: q, answer: a, .. } = caption_scene(f, 0, t, 32.0);
                    for w in q.split_whitespace().chain(a.split_whitespace()) {
                        assert!(words.contains(&w), "word {w} outside vocabulary");
                    }
                    let mut sorted = local.clone();
                    sorted.sort_by(|a, b| (a.1 * a.1 + a.2 * a.2).total_cmp(&(b.1 * b.1 + b.2 * b.2)));
                    let expected = match t {
                        TemplateId::Counting(k) => local.iter().filter(|o| o.0 == k).count().to_string(),
                        TemplateId::NearestObject => sorted
                            .first()
                            .map_or("none".into(), |o| format!("{} {}", o.0.word(), independent_direction(o.1, o.2))),
                        TemplateId::RelativePosition(k) => sorted
                            .iter()
                            .find(|o| o.0 == k)
                            .map_or("none".into(), |o| independent_direction(o.1, o.2).to_string()),
                        TemplateId::EgoManeuver => {
                            let blocked = local.iter().any(|o| o.1 > 0.0 && o.1 <= 15.0 && o.2.abs() <= 3.0);
                            if blocked { "no" } else { "yes" }.to_string()
                        }
                    };
                    assert_eq!(a, expected, "seed {seed} template {t:?}");
                }
            }
        }
    }

    #[test]
    fn template_codes_round_trip() {
        for t in ALL_TEMPLATES {
            assert_eq!(TemplateId::from_code(t.code()), Some(t));
        }
        assert_eq!(TemplateId::from_code(8), None);
    }
}
