//! Versioned little-endian dataset container.
//!
//! ```text
//! magic            4 bytes  "DWM1"
//! version          u32      currently 1
//! caption_region   f64      half-width (m) of the square used for captions
//! record_count     u32
//! record × record_count:
//!   seed           u64
//!   dt_seconds     f64
//!   frame_count    u32
//!   frame × frame_count:
//!     ego x, y, yaw        f64 × 3
//!     ground_z             f64
//!     box_count            u32
//!     box × box_count:
//!       center xyz         f64 × 3
//!       size xyz           f64 × 3
//!       yaw                f64
//!       velocity xy        f64 × 2
//!       class              u8   (0 car, 1 truck, 2 pedestrian)
//!   qa_count       u32
//!   qa × qa_count:
//!     frame_index          u32
//!     template             u8
//!     instruction          u32 byte length + UTF-8
//!     answer               u32 byte length + UTF-8
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::caption::{caption_scene, QAPair, TemplateId, ALL_TEMPLATES};
use super::{generate_scene, Cuboid, ObjectClass, Pose2, SceneConfig, SceneFrame, SceneSequence};
use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};

pub const DATASET_MAGIC: &[u8; 4] = b"DWM1";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceRecord {
    pub sequence: SceneSequence,
    pub qa: Vec<QAPair>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub caption_region: f64,
    pub records: Vec<SequenceRecord>,
}

fn split_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `sequences` scenes with every template captioned on every frame.
pub fn generate_dataset(
    config: &SceneConfig,
    seed: u64,
    sequences: usize,
    caption_region: f64,
) -> Result<Dataset> {
    let records = (0..sequences)
        .map(|i| {
            let sequence = generate_scene(config, split_seed(seed, i as u64))?;
            let qa = sequence
                .frames
                .iter()
                .enumerate()
                .flat_map(|(f, frame)| {
                    ALL_TEMPLATES
                        .iter()
                        .map(move |&t| caption_scene(frame, f, t, caption_region))
                })
                .collect();
            Ok(SequenceRecord { sequence, qa })
        })
        .collect::<Result<_>>()?;
    Ok(Dataset {
        caption_region,
        records,
    })
}


pub fn write_dataset<W: Write>(out: W, ds: &Dataset) -> Result<()> {
    let mut w = Writer(out);
    w.0.write_all(DATASET_MAGIC)?;
    w.u32(DATASET_VERSION)?;
    w.f64(ds.caption_region)?;
    w.len(ds.records.len())?;
    for rec in &ds.records {
        let seq = &rec.sequence;
        w.u64(seq.seed)?;
        w.f64(seq.dt_seconds)?;
        w.len(seq.frames.len())?;
        for f in &seq.frames {
            w.f64(f.ego_pose.x)?;
            w.f64(f.ego_pose.y)?;
            w.f64(f.ego_pose.yaw)?;
            w.f64(f.ground_z)?;
            w.len(f.boxes.len())?;
            for b in &f.boxes {
                for v in b.center.iter().chain(&b.size) {
                    w.f64(*v)?;
                }
                w.f64(b.yaw)?;
                w.f64(b.velocity[0])?;
                w.f64(b.velocity[1])?;
                w.u8(b.class.index() as u8)?;
            }
        }
        w.len(rec.qa.len())?;
        for qa in &rec.qa {
            w.len(qa.frame_index)?;
            w.u8(qa.template.code())?;
            w.str(&qa.instruction)?;
            w.str(&qa.answer)?;
        }
    }
    Ok(())
}

pub fn read_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != DATASET_MAGIC {
        return Err(Error::Corrupt("bad magic bytes".into()));
    }
    let version = r.u32("version")?;
    if version != DATASET_VERSION {
        return Err(Error::Version {
            found: version,
            supported: DATASET_VERSION,
        });
    }
    let caption_region = r.f64("caption region")?;
    let n_rec = r.u32("record count")?;
    let mut records = Vec::new();
    for _ in 0..n_rec {
        let seed = r.u64("seed")?;
        let dt_seconds = r.f64("dt")?;
        let n_frames = r.u32("frame count")?;
        let mut frames = Vec::new();
        for _ in 0..n_frames {
            let ego_pose = Pose2 {
                x: r.f64("ego x")?,
                y: r.f64("ego y")?,
                yaw: r.f64("ego yaw")?,
            };
            let ground_z = r.f64("ground z")?;
            let n_boxes = r.u32("box count")?;
            let mut boxes = Vec::new();
            for _ in 0..n_boxes {
                let mut v = [0.0; 9];
                for x in &mut v {
                    *x = r.f64("box field")?;
                }
                let class_code = r.u8("class")?;
                let class = ObjectClass::from_index(class_code as usize)
                    .ok_or_else(|| Error::Corrupt(format!("unknown class code {class_code}")))?;
                boxes.push(Cuboid {
                    center: [v[0], v[1], v[2]],
                    size: [v[3], v[4], v[5]],
                    yaw: v[6],
                    velocity: [v[7], v[8]],
                    class,
                });
            }
            frames.push(SceneFrame {
                ego_pose,
                boxes,
                ground_z,
            });
        }
        let n_qa = r.u32("qa count")?;
        let mut qa = Vec::new();
        for _ in 0..n_qa {
            let frame_index = r.u32("frame index")? as usize;
            let code = r.u8("template")?;
            let template = TemplateId::from_code(code)
                .ok_or_else(|| Error::Corrupt(format!("unknown template code {code}")))?;
            let instruction = r.str("instruction")?;
            let answer = r.str("answer")?;
            if frame_index >= frames.len() {
                return Err(Error::Corrupt(format!("qa frame index {frame_index} out of range")));
            }
            qa.push(QAPair {
                instruction,
                answer,
                frame_index,
                template,
            });
        }
        records.push(SequenceRecord {
            sequence: SceneSequence {
                frames,
                dt_seconds,
                seed,
            },
            qa,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::Corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Dataset {
        caption_region,
        records,
    })
}

pub fn save_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    let mut buf = Vec::new();
    write_dataset(&mut buf, ds)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    read_dataset(&bytes)
}
