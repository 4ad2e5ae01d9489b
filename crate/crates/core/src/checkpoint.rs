//! Versioned checkpoint container.
//!
//! ```text
//! magic             4 bytes  "DWMK"
//! version           u32      currently 1
//! completed_stage   u8
//! phase, step       u8, u64  phase in flight (255 when none)
//! dt_seconds        f64
//! config            string   rendered key = value run configuration
//! param_count       u32
//! param × count:    name string, rank u32, dims u32 × rank, values f64s
//! has_optimizer     u8
//!   step            u64
//!   trainable       u8 × param_count
//!   moments         per param: u8 flag, then m and v as f64s
//! rng               seed 32 bytes, stream u64, word position u128
//! ```

use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::binio::{Reader, Writer};
use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::model::WorldModel;
use crate::optim::Adam;
use crate::tensor::Tensor;
use crate::trainer::{Phase, RunConfig, Trainer};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DWMK";
pub const CHECKPOINT_VERSION: u32 = 1;
const NO_PHASE: u8 = 255;

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: usize,
    pub trainable: Vec<bool>,
    pub m: Vec<Option<Tensor>>,
    pub v: Vec<Option<Tensor>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut r = ChaCha8Rng::from_seed(self.seed);
        r.set_stream(self.stream);
        r.set_word_pos(self.word_pos);
        r
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub completed_stage: u8,
    /// Phase in flight and its next step, for mid-phase resume.
    pub progress: Option<(Phase, usize)>,
    pub dt_seconds: f64,
    pub config: String,
    pub params: Vec<(String, Tensor)>,
    pub optimizer: Option<OptimizerState>,
    pub rng: RngState,
}

impl Checkpoint {
    /// Snapshot of a trainer. `in_flight` keeps optimizer state and the phase
    /// position so the next step can be replayed exactly.
    pub fn capture(t: &Trainer, in_flight: bool) -> Self {
        let store = &t.model.store;
        Self {
            completed_stage: t.completed_stage,
            progress: in_flight.then_some((t.phase, t.step)),
            dt_seconds: t.model.queries.dt_seconds,
            config: t.run.to_key_values().render(),
            params: store.iter().map(|(_, e)| (e.name.clone(), e.value.clone())).collect(),
            optimizer: in_flight.then(|| OptimizerState {
                step: t.opt.step,
                trainable: t.opt.trainable_mask().to_vec(),
                m: t.opt.m.clone(),
                v: t.opt.v.clone(),
            }),
            rng: RngState::capture(&t.rng),
        }
    }

    pub fn run_config(&self) -> Result<RunConfig> {
        RunConfig::from_key_values(&KeyValues::parse(&self.config)?)
    }

    /// Rebuilds the model and trainer; parameter names and shapes must match
    /// what the stored configuration constructs.
    pub fn restore(&self) -> Result<Trainer> {
        let run = self.run_config()?;
        let mut model = WorldModel::new(&run.model, self.dt_seconds, run.seed)?;
        if model.store.len() != self.params.len() {
            return Err(Error::Corrupt(format!(
                "checkpoint holds {} parameters, the configured model has {}",
                self.params.len(),
                model.store.len()
            )));
        }
        for (name, value) in &self.params {
            let id = model
                .store
                .id(name)
                .ok_or_else(|| Error::Corrupt(format!("unknown parameter {name}")))?;
            let slot = model.store.get_mut(id);
            if slot.shape() != value.shape() {
                return Err(Error::Corrupt(format!(
                    "parameter {name}: stored shape {:?}, expected {:?}",
                    value.shape(),
                    slot.shape()
                )));
            }
            *slot = value.clone();
        }
        let mut t = Trainer::new(model, run);
        t.completed_stage = self.completed_stage;
        if let Some((phase, step)) = self.progress {
            t.begin_phase(phase);
            t.step = step;
            if let Some(o) = &self.optimizer {
                t.opt = Adam::new(t.run.adam(phase), &t.model.store, &Default::default());
                t.opt.restore_mask(o.trainable.clone());
                t.opt.step = o.step;
                t.opt.m = o.m.clone();
                t.opt.v = o.v.clone();
            }
        }
        t.rng = self.rng.restore();
        Ok(t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION)?;
        w.u8(self.completed_stage)?;
        match self.progress {
            Some((p, s)) => {
                w.u8(p.index() as u8)?;
                w.u64(s as u64)?;
            }
            None => {
                w.u8(NO_PHASE)?;
                w.u64(0)?;
            }
        }
        w.f64(self.dt_seconds)?;
        w.str(&self.config)?;
        w.len(self.params.len())?;
        for (name, t) in &self.params {
            w.str(name)?;
            w.len(t.rank())?;
            for &d in t.shape() {
                w.len(d)?;
            }
            w.f64s(t.data())?;
        }
        match &self.optimizer {
            None => w.u8(0)?,
            Some(o) => {
                w.u8(1)?;
                w.u64(o.step as u64)?;
                for &b in &o.trainable {
                    w.u8(u8::from(b))?;
                }
                for (m, v) in o.m.iter().zip(&o.v) {
                    match (m, v) {
                        (Some(m), Some(v)) => {
                            w.u8(1)?;
                            w.f64s(m.data())?;
                            w.f64s(v.data())?;
                        }
                        _ => w.u8(0)?,
                    }
                }
            }
        }
        w.0.extend_from_slice(&self.rng.seed);
        w.u64(self.rng.stream)?;
        w.u128(self.rng.word_pos)?;
        Ok(w.0)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4, "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::Corrupt("not a checkpoint file".into()));
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version { found: version, supported: CHECKPOINT_VERSION });
        }
        let completed_stage = r.u8("stage")?;
        let phase = r.u8("phase")?;
        let step = r.u64("step")? as usize;
        let progress = match phase {
            NO_PHASE => None,
            p => Some((
                Phase::from_index(p as usize).ok_or_else(|| Error::Corrupt(format!("unknown phase {p}")))?,
                step,
            )),
        };
        let dt_seconds = r.f64("dt")?;
        let config = r.str("config")?;
        let n = r.u32("param count")? as usize;
        let mut params = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let name = r.str("param name")?;
            let rank = r.u32("rank")? as usize;
            let shape = (0..rank).map(|_| r.u32("dim").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let data = r.f64s("param values")?;
            if shape.iter().product::<usize>() != data.len() {
                return Err(Error::Corrupt(format!("parameter {name}: shape {shape:?} vs {} values", data.len())));
            }
            params.push((name, Tensor::from_vec(&shape, data)));
        }
        let optimizer = match r.u8("optimizer flag")? {
            0 => None,
            _ => {
                let step = r.u64("optimizer step")? as usize;
                let trainable = (0..n).map(|_| r.u8("mask").map(|b| b != 0)).collect::<Result<Vec<_>>>()?;
                let (mut m, mut v) = (Vec::with_capacity(n), Vec::with_capacity(n));
                for (_, p) in &params {
                    if r.u8("moment flag")? == 0 {
                        m.push(None);
                        v.push(None);
                        continue;
                    }
                    let (a, b) = (r.f64s("m")?, r.f64s("v")?);
                    if a.len() != p.numel() || b.len() != p.numel() {
                        return Err(Error::Corrupt("moment size mismatch".into()));
                    }
                    m.push(Some(Tensor::from_vec(p.shape(), a)));
                    v.push(Some(Tensor::from_vec(p.shape(), b)));
                }
                Some(OptimizerState { step, trainable, m, v })
            }
        };
        let seed: [u8; 32] = r.take(32, "rng seed")?.try_into().unwrap();
        let rng = RngState { seed, stream: r.u64("rng stream")?, word_pos: r.u128("rng position")? };
        if r.pos != bytes.len() {
            return Err(Error::Corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { completed_stage, progress, dt_seconds, config, params, optimizer, rng })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
