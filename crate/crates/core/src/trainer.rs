//! Three-stage training recipe and evaluation.
//!
//! Stage 1 pretrains the geometry extractor (1a) and then the tokenizer and
//! renderer (1b). Stage 2 aligns language: projectors only (2a), then the
//! language stack with the tokenizer (2b). Stage 3 trains everything except
//! the frozen extractor on the joint objective.

use std::collections::HashSet;
use std::fmt::Write as _;

use log::{info, warn};
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::config::{parse_bool, parse_num, KeyValues, ModelConfig};
use crate::error::{Error, Result};
use crate::geometry_opt::{
    cosine_loss, gram_loss, gram_matrices, gram_values, horizon_weight, render_loss, total_loss, LossParts,
};
use crate::language_core::{build_text, language_loss};
use crate::metrics_eval::{chamfer, roi_filter, rouge_l, EvalReport, Roi};
use crate::model::{prepare_samples, FrameInput, ParamGroup, Sample, WorldModel, ZeroPath};
use crate::optim::{Adam, AdamConfig};
use crate::render::PointCloud;
use crate::scene_synth::{Dataset, SceneConfig};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Phase {
    Geometry,
    Tokenizer,
    Projectors,
    Language,
    Joint,
}

impl Phase {
    pub const ALL: [Phase; 5] = [Phase::Geometry, Phase::Tokenizer, Phase::Projectors, Phase::Language, Phase::Joint];

    pub fn stage(self) -> u8 {
        match self {
            Phase::Geometry | Phase::Tokenizer => 1,
            Phase::Projectors | Phase::Language => 2,
            Phase::Joint => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Phase::Geometry => "1a",
            Phase::Tokenizer => "1b",
            Phase::Projectors => "2a",
            Phase::Language => "2b",
            Phase::Joint => "3",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn of_stage(stage: u8) -> &'static [Phase] {
        match stage {
            1 => &Self::ALL[0..2],
            2 => &Self::ALL[2..4],
            3 => &Self::ALL[4..5],
            _ => &[],
        }
    }

    pub fn trainable(self) -> &'static [ParamGroup] {
        use ParamGroup::*;
        match self {
            Phase::Geometry => &[Extractor, RenderHead],
            Phase::Tokenizer => &[Tokenizer, Projector, Render, RenderHead],
            Phase::Projectors => &[Projector],
            Phase::Language => &[Projector, Tokenizer, Language],
            Phase::Joint => &[Tokenizer, Projector, Language, Queries, Link, BevHead, Render, RenderHead],
        }
    }
}

/// Everything a run needs besides the data: model dims, optimizer schedule,
/// loss switches and the synthetic-data recipe.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: String,
    pub model: ModelConfig,
    pub scene: SceneConfig,
    pub seed: u64,
    pub data_seed: u64,
    pub sequences: usize,
    /// Fraction of sequences held out for evaluation.
    pub holdout: f64,
    pub rays_per_frame: usize,
    pub batch: usize,
    pub steps: [usize; 5],
    pub lr: [f64; 5],
    pub warmup: usize,
    pub clip: f64,
    pub loss_cos: bool,
    pub loss_gram: bool,
    pub cos_weight: f64,
    pub gram_weight: f64,
    /// Evaluation uses at most this many held-out samples.
    pub eval_samples: usize,
}

impl RunConfig {
    pub fn desk() -> Self {
        let model = ModelConfig::desk();
        Self {
            preset: "desk".into(),
            scene: SceneConfig { extent: model.extent, ..SceneConfig::default() },
            model,
            seed: 7,
            data_seed: 7,
            sequences: 200,
            holdout: 0.1,
            rays_per_frame: 256,
            batch: 2,
            steps: [400, 600, 200, 1500, 1500],
            lr: [3e-3, 2e-3, 2e-3, 1e-3, 1e-3],
            warmup: 20,
            clip: 1.0,
            loss_cos: true,
            loss_gram: true,
            cos_weight: 1.0,
            gram_weight: 1.0,
            eval_samples: 40,
        }
    }

    /// Reduced dims and budgets that finish inside a test run.
    pub fn ci() -> Self {
        let model = ModelConfig::ci();
        Self {
            preset: "ci".into(),
            scene: SceneConfig {
                extent: model.extent,
                static_boxes: 4,
                dynamic_boxes: 2,
                ..SceneConfig::default()
            },
            model,
            rays_per_frame: 128,
            batch: 1,
            steps: [150, 250, 60, 600, 300],
            eval_samples: 40,
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "ci" => Ok(Self::ci()),
            _ => Err(Error::Config(format!("unknown preset {name:?}"))),
        }
    }

    /// Preset named by `model.preset` (default `desk`), then every other key.
    /// Unknown keys are configuration errors.
    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        let preset = kv.entries.get("model.preset").map_or("desk", String::as_str);
        let mut cfg = Self::preset(preset)?;
        for (k, v) in &kv.entries {
            cfg.apply(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, key: &str, v: &str) -> Result<()> {
        if self.model.apply(key, v)? || self.scene.apply(key, v)? {
            return Ok(());
        }
        let phase_slot = |suffix: &str| Phase::ALL.iter().position(|p| p.name() == suffix);
        match key {
            "train.seed" => self.seed = parse_num(key, v)?,
            "data.seed" => self.data_seed = parse_num(key, v)?,
            "data.sequences" => self.sequences = parse_num(key, v)?,
            "data.holdout" => self.holdout = parse_num(key, v)?,
            "train.rays" => self.rays_per_frame = parse_num(key, v)?,
            "train.batch" => self.batch = parse_num(key, v)?,
            "train.warmup" => self.warmup = parse_num(key, v)?,
            "train.clip" => self.clip = parse_num(key, v)?,
            "loss.cos" => self.loss_cos = parse_bool(key, v)?,
            "loss.gram" => self.loss_gram = parse_bool(key, v)?,
            "loss.cos_weight" => self.cos_weight = parse_num(key, v)?,
            "loss.gram_weight" => self.gram_weight = parse_num(key, v)?,
            "eval.samples" => self.eval_samples = parse_num(key, v)?,
            _ => {
                if let Some(i) = key.strip_prefix("train.steps_").and_then(phase_slot) {
                    self.steps[i] = parse_num(key, v)?;
                } else if let Some(i) = key.strip_prefix("train.lr_").and_then(phase_slot) {
                    self.lr[i] = parse_num(key, v)?;
                } else {
                    return Err(Error::Config(format!("unknown configuration key {key:?}")));
                }
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.scene.validate()?;
        if self.scene.frames < self.model.horizon + 1 {
            return Err(Error::Config(format!(
                "scene.frames = {} cannot cover a horizon of {}",
                self.scene.frames, self.model.horizon
            )));
        }
        if !(0.0..1.0).contains(&self.holdout) || self.sequences < 2 {
            return Err(Error::Config("need at least two sequences and a holdout fraction in [0, 1)".into()));
        }
        if self.batch == 0 || self.rays_per_frame == 0 {
            return Err(Error::Config("batch and ray counts must be positive".into()));
        }
        if self.lr.iter().any(|&l| !(l > 0.0)) || self.cos_weight < 0.0 || self.gram_weight < 0.0 {
            return Err(Error::Config("learning rates must be positive and loss weights non-negative".into()));
        }
        Ok(())
    }

    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        kv.set("model.preset", &self.preset);
        self.model.to_key_values(&mut kv);
        self.scene.to_key_values(&mut kv);
        kv.set("train.seed", self.seed);
        kv.set("data.seed", self.data_seed);
        kv.set("data.sequences", self.sequences);
        kv.set("data.holdout", self.holdout);
        kv.set("train.rays", self.rays_per_frame);
        kv.set("train.batch", self.batch);
        kv.set("train.warmup", self.warmup);
        kv.set("train.clip", self.clip);
        for p in Phase::ALL {
            kv.set(&format!("train.steps_{}", p.name()), self.steps[p.index()]);
            kv.set(&format!("train.lr_{}", p.name()), self.lr[p.index()]);
        }
        kv.set("loss.cos", self.loss_cos);
        kv.set("loss.gram", self.loss_gram);
        kv.set("loss.cos_weight", self.cos_weight);
        kv.set("loss.gram_weight", self.gram_weight);
        kv.set("eval.samples", self.eval_samples);
        kv
    }

    /// Short SHA-256 digest of the rendered key/value form.
    pub fn digest(&self) -> String {
        let h = Sha256::digest(self.to_key_values().render().as_bytes());
        h.iter().take(8).fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    /// Number of training sequences; the rest are held out.
    pub fn train_sequences(&self, available: usize) -> usize {
        let held = ((available as f64 * self.holdout).ceil() as usize).max(1);
        available.saturating_sub(held).max(1)
    }

    pub fn adam(&self, phase: Phase) -> AdamConfig {
        let steps = self.steps[phase.index()].max(1);
        AdamConfig {
            lr: self.lr[phase.index()],
            warmup_steps: self.warmup.min(steps / 4),
            total_steps: steps,
            clip_norm: self.clip,
            ..AdamConfig::default()
        }
    }
}

/// One logged optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub phase: Phase,
    pub step: usize,
    pub total: f64,
    pub lang: Option<f64>,
    /// λ-weighted render loss per horizon; `None` where the horizon is unused.
    pub render: Vec<Option<f64>>,
    /// λ_i for each horizon slot.
    pub lambda: Vec<f64>,
    pub cos: Option<f64>,
    pub gram: Option<f64>,
    pub grad_norm: f64,
    /// Gradient norm that reached extractor parameters on this step.
    pub extractor_grad: f64,
    pub lr: f64,
}

impl LogRow {
    pub fn csv_header(horizon: usize) -> String {
        let mut s = String::from("step,phase,total,lang");
        for i in 0..=horizon {
            let _ = write!(s, ",render_{i}");
        }
        for i in 0..=horizon {
            let _ = write!(s, ",lambda_{i}");
        }
        s.push_str(",cos,gram,grad_norm,extractor_grad,lr");
        s
    }

    pub fn csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.8}"));
        let mut s = format!("{},{},{:.8},{}", self.step, self.phase.name(), self.total, opt(self.lang));
        for r in &self.render {
            let _ = write!(s, ",{}", opt(*r));
        }
        for l in &self.lambda {
            let _ = write!(s, ",{l}");
        }
        let _ = write!(
            s,
            ",{},{},{:.6e},{:e},{:.6e}",
            opt(self.cos),
            opt(self.gram),
            self.grad_norm,
            self.extractor_grad,
            self.lr
        );
        s
    }
}

/// Training and held-out samples drawn from one dataset.
/// Stage-3 ablation arms, all branched from the same stage-2 weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Full,
    RenderOnly,
    RenderCos,
    NoLink,
    NoEgoModulation,
}

impl Variant {
    pub const ALL: [Variant; 5] =
        [Variant::Full, Variant::RenderOnly, Variant::RenderCos, Variant::NoLink, Variant::NoEgoModulation];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::RenderOnly => "render-only",
            Variant::RenderCos => "render+cos",
            Variant::NoLink => "no-link",
            Variant::NoEgoModulation => "no-em",
        }
    }

    /// Switches losses and link components; the parameter set is unchanged so
    /// every arm trains the same budget from the same starting point.
    pub fn apply(self, t: &mut Trainer) {
        let (cos, gram, link, em) = match self {
            Variant::Full => (true, true, true, true),
            Variant::RenderOnly => (false, false, true, true),
            Variant::RenderCos => (true, false, true, true),
            Variant::NoLink => (true, true, false, true),
            Variant::NoEgoModulation => (true, true, true, false),
        };
        t.run.loss_cos = cos;
        t.run.loss_gram = gram;
        t.run.model.link_enabled = link;
        t.run.model.ego_modulation = em;
        t.model.cfg.link_enabled = link;
        t.model.cfg.ego_modulation = em;
        t.model.link.enabled = link;
        t.model.link.ego_modulation = em;
    }
}

#[derive(Clone, Debug)]
pub struct Split {
    pub train: Vec<Sample>,
    pub eval: Vec<Sample>,
}

/// Splits by sequence: the last `holdout` fraction is held out, and at most
/// `eval_samples` held-out samples are kept.
pub fn split_samples(ds: &Dataset, model: &WorldModel, run: &RunConfig) -> Result<Split> {
    let n = ds.records.len();
    let n_train = run.train_sequences(n);
    let train = prepare_samples(ds, model, 0..n_train)?;
    let mut eval = prepare_samples(ds, model, n_train..n)?;
    eval.truncate(run.eval_samples.max(1));
    Ok(Split { train, eval })
}

/// RNG for a phase, derived from the run seed so phases are independent.
pub fn phase_rng(seed: u64, phase: Phase) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (0xA076_1D64_78BD_642F_u64.wrapping_mul(phase.index() as u64 + 1)))
}

#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: WorldModel,
    pub run: RunConfig,
    /// Highest fully completed stage (0 before stage 1).
    pub completed_stage: u8,
    pub phase: Phase,
    pub step: usize,
    pub opt: Adam,
    pub rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(model: WorldModel, run: RunConfig) -> Self {
        let opt = Adam::new(run.adam(Phase::Geometry), &model.store, &HashSet::new());
        let rng = phase_rng(run.seed, Phase::Geometry);
        Self { model, run, completed_stage: 0, phase: Phase::Geometry, step: 0, opt, rng }
    }

    pub fn trainable_set(&self, phase: Phase) -> HashSet<ParamId> {
        self.model.ids_in(phase.trainable()).into_iter().collect()
    }

    pub fn begin_phase(&mut self, phase: Phase) {
        self.phase = phase;
        self.step = 0;
        let set = self.trainable_set(phase);
        self.opt = Adam::new(self.run.adam(phase), &self.model.store, &set);
        self.rng = phase_rng(self.run.seed, phase);
    }

    pub fn phase_done(&self) -> bool {
        self.step >= self.run.steps[self.phase.index()]
    }

    /// Runs every phase of `stage`, enforcing that the previous stage finished.
    pub fn train_stage(&mut self, stage: u8, samples: &[Sample], on_step: &mut dyn FnMut(&LogRow)) -> Result<()> {
        if !(1..=3).contains(&stage) {
            return Err(Error::Config(format!("unknown stage {stage}")));
        }
        if self.completed_stage + 1 != stage {
            return Err(Error::Stage(format!(
                "stage {stage} needs a completed stage-{} checkpoint; this one has completed stage {}",
                stage - 1,
                self.completed_stage
            )));
        }
        for &phase in Phase::of_stage(stage) {
            self.begin_phase(phase);
            self.continue_phase(samples, on_step)?;
        }
        self.completed_stage = stage;
        Ok(())
    }

    /// Steps the current phase to its configured length.
    pub fn continue_phase(&mut self, samples: &[Sample], on_step: &mut dyn FnMut(&LogRow)) -> Result<()> {
        while !self.phase_done() {
            let row = self.step_once(samples)?;
            on_step(&row);
        }
        info!("phase {} finished after {} steps", self.phase.name(), self.step);
        Ok(())
    }

    /// One optimizer step on a freshly drawn batch.
    pub fn step_once(&mut self, samples: &[Sample]) -> Result<LogRow> {
        if samples.is_empty() {
            return Err(Error::Empty("no training samples".into()));
        }
        let batch: Vec<usize> = (0..self.run.batch).map(|_| self.rng.gen_range(0..samples.len())).collect();
        let mut g = Graph::new();
        let mut acc = StepTerms::new(self.model.cfg.horizon);
        let mut losses = Vec::with_capacity(batch.len());
        for &i in &batch {
            let l = self.sample_loss(&mut g, &samples[i], &mut acc)?;
            losses.push(l);
        }
        let sum = g.add_all(&losses);
        let loss = g.scale(sum, 1.0 / batch.len() as f64);
        let total = g.value(loss).item();
        if !total.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss diverged in phase {} at step {}",
                self.phase.name(),
                self.step
            )));
        }
        let grads = g.backward(loss).param_grads();
        let extractor_grad = grads
            .iter()
            .filter(|(id, _)| ParamGroup::of(self.model.store.name(*id)) == ParamGroup::Extractor)
            .map(|(_, t)| t.sq_norm())
            .sum::<f64>()
            .sqrt();
        if self.phase != Phase::Geometry && extractor_grad != 0.0 {
            warn!("extractor received gradient {extractor_grad:e} outside pretraining");
        }
        let lr = self.opt.config.lr_at(self.opt.step);
        let grad_norm = self.opt.update(&mut self.model.store, &grads);
        let row = acc.finish(self.phase, self.step, total, batch.len(), grad_norm, extractor_grad, lr);
        self.step += 1;
        Ok(row)
    }

    fn rays(&mut self, frame: &FrameInput) -> (Vec<[f64; 3]>, Vec<f64>) {
        let valid: Vec<usize> = self
            .model
            .valid_rays(&frame.lidar)
            .iter()
            .enumerate()
            .filter_map(|(k, &v)| v.then_some(k))
            .collect();
        let k = self.run.rays_per_frame.min(valid.len());
        let picked = sample_indices(&mut self.rng, valid.len(), k);
        picked
            .iter()
            .map(|j| {
                let r = valid[j];
                (frame.lidar.directions[r], frame.lidar.gt_depths[r])
            })
            .unzip()
    }

    /// λ-weighted depth loss of `grid` (or of explicit volume rows) on frame `i` rays.
    fn frame_render(&mut self, g: &mut Graph, source: RenderSource, frame: &FrameInput, i: usize) -> Result<Option<(Var, Var)>> {
        let (dirs, gt) = self.rays(frame);
        if dirs.is_empty() {
            return Ok(None);
        }
        let valid = vec![true; gt.len()];
        let (d, rows) = match source {
            RenderSource::Grid(grid) => {
                let (d, _, rows) = self.model.render_grid(g, grid, &dirs, Some(&mut self.rng))?;
                (d, rows)
            }
            RenderSource::Rows(rows) => (self.model.render_rows(g, rows, &dirs, Some(&mut self.rng))?.0, rows),
        };
        Ok(Some((render_loss(g, d, &gt, &valid, i)?, rows)))
    }

    fn latent_terms(&self, g: &mut Graph, rows: Var, frame: &FrameInput, acc: &mut StepTerms) -> (Option<Var>, Option<Var>) {
        if !self.run.loss_cos && !self.run.loss_gram {
            return (None, None);
        }
        let target = self.model.target_rows(g, &frame.occupancy);
        let cos = self.run.loss_cos.then(|| {
            let c = cosine_loss(g, rows, &target);
            acc.cos.push(g.value(c).item());
            g.scale(c, self.run.cos_weight)
        });
        let gram = self.run.loss_gram.then(|| {
            let pred = gram_matrices(g, rows, &self.model.pooling);
            let tv = gram_values(&target, &self.model.pooling);
            let l = gram_loss(g, pred, &tv);
            acc.gram.push(g.value(l).item());
            // Relative to the target's own Gram energy so the term stays O(1).
            let energy = tv.iter().map(|t| t.sq_norm()).sum::<f64>() / 3.0;
            g.scale(l, self.run.gram_weight / (energy + 1e-12))
        });
        (cos, gram)
    }

    fn sample_loss(&mut self, g: &mut Graph, s: &Sample, acc: &mut StepTerms) -> Result<Var> {
        let mut parts = LossParts::default();
        match self.phase {
            Phase::Geometry => {
                let rows = self.model.extractor_rows(g, &s.frames[0].occupancy);
                if let Some((l, _)) = self.frame_render(g, RenderSource::Rows(rows), &s.frames[0], 0)? {
                    acc.render(0, g.value(l).item());
                    parts.render.push(l);
                }
            }
            Phase::Tokenizer => {
                let enc = self.model.encode(g, &s.frames[0].pixels);
                let grid = self.model.zero_grid(g, &enc, None, ZeroPath::Compressed);
                if let Some((l, rows)) = self.frame_render(g, RenderSource::Grid(grid), &s.frames[0], 0)? {
                    acc.render(0, g.value(l).item());
                    parts.render.push(l);
                    if self.run.loss_cos {
                        let target = self.model.target_rows(g, &s.frames[0].occupancy);
                        let c = cosine_loss(g, rows, &target);
                        acc.cos.push(g.value(c).item());
                        parts.cos = Some(g.scale(c, self.run.cos_weight));
                    }
                }
            }
            Phase::Projectors | Phase::Language => {
                let qa = &s.qa[self.rng.gen_range(0..s.qa.len())];
                let enc = self.model.encode(g, &s.frames[0].pixels);
                let (text, targets) = build_text(&self.model.vocab, &qa.instruction, Some(&qa.answer));
                let out = self.model.lm.forward(g, &self.model.store, enc.tokens, &text, None)?;
                let l = language_loss(g, out.logits, &targets)?;
                acc.lang.push(g.value(l).item());
                parts.lang = Some(l);
            }
            Phase::Joint => {
                let qa = &s.qa[self.rng.gen_range(0..s.qa.len())];
                let out = self.model.joint_forward(g, &s.frames[0], &s.motions, qa)?;
                let l = language_loss(g, out.logits, &out.targets)?;
                acc.lang.push(g.value(l).item());
                parts.lang = Some(l);
                let (mut coses, mut grams) = (Vec::new(), Vec::new());
                for (i, (&grid, frame)) in out.grids.iter().zip(&s.frames).enumerate() {
                    let Some((l, rows)) = self.frame_render(g, RenderSource::Grid(grid), frame, i)? else {
                        continue;
                    };
                    acc.render(i, g.value(l).item());
                    parts.render.push(l);
                    let (c, gr) = self.latent_terms(g, rows, frame, acc);
                    coses.extend(c);
                    grams.extend(gr);
                }
                parts.cos = mean_var(g, &coses);
                parts.gram = mean_var(g, &grams);
            }
        }
        if parts.lang.is_none() && parts.render.is_empty() {
            return Err(Error::Empty(format!("sample {}:{} produced no loss terms", s.sequence, s.t)));
        }
        total_loss(g, &parts)
    }

    /// Largest update norm of any parameter outside `phase`'s trainable set.
    pub fn frozen_update_norm(&self, before: &ParamStore, phase: Phase) -> f64 {
        let trainable = self.trainable_set(phase);
        before
            .iter()
            .filter(|(id, _)| !trainable.contains(id))
            .map(|(id, e)| e.value.zip_map(self.model.store.get(id), |a, b| a - b).sq_norm().sqrt())
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Copy)]
enum RenderSource {
    Grid(Var),
    Rows(Var),
}

fn mean_var(g: &mut Graph, vs: &[Var]) -> Option<Var> {
    if vs.is_empty() {
        return None;
    }
    let s = g.add_all(vs);
    Some(g.scale(s, 1.0 / vs.len() as f64))
}

/// Per-step accumulators for logging, averaged over the batch.
struct StepTerms {
    lang: Vec<f64>,
    render: Vec<Vec<f64>>,
    cos: Vec<f64>,
    gram: Vec<f64>,
}

impl StepTerms {
    fn new(horizon: usize) -> Self {
        Self { lang: Vec::new(), render: vec![Vec::new(); horizon + 1], cos: Vec::new(), gram: Vec::new() }
    }

    fn render(&mut self, i: usize, v: f64) {
        self.render[i].push(v);
    }

    #[allow(clippy::too_many_arguments)]
    fn finish(
        self,
        phase: Phase,
        step: usize,
        total: f64,
        batch: usize,
        grad_norm: f64,
        extractor_grad: f64,
        lr: f64,
    ) -> LogRow {
        let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / batch as f64);
        LogRow {
            phase,
            step,
            total,
            lang: mean(&self.lang),
            lambda: (0..self.render.len()).map(horizon_weight).collect(),
            render: self.render.iter().map(|v| mean(v)).collect(),
            cos: mean(&self.cos),
            gram: mean(&self.gram),
            grad_norm,
            extractor_grad,
            lr,
        }
    }
}

fn valid_cloud(model: &WorldModel, frame: &FrameInput) -> PointCloud {
    let keep = model.valid_rays(&frame.lidar);
    let idx: Vec<usize> = (0..keep.len()).filter(|&k| keep[k]).collect();
    PointCloud { points: frame.lidar.subset(&idx).points() }
}

/// Ray-casting fallback when a rendered cloud is empty: the sensor origin, so
/// the frame still counts and is penalized rather than skipped.
fn nonempty(cloud: PointCloud, origin: [f64; 3]) -> PointCloud {
    if cloud.is_empty() {
        PointCloud { points: vec![origin] }
    } else {
        cloud
    }
}

/// Chamfer per horizon (only the current frame before stage 3) and, from
/// stage 2 on, answer accuracy and ROUGE-L over every question.
/// Grids a checkpoint at `completed_stage` can produce for a sample: the
/// current frame only before stage 3, every horizon after it. Stage-3
/// predictions are conditioned on the first instruction and the model's own
/// decoded answer.
pub fn predict_grids(model: &WorldModel, completed_stage: u8, s: &Sample) -> Result<Vec<Tensor>> {
    if completed_stage >= 3 {
        let qa = s.qa.first().ok_or_else(|| Error::Empty("sample has no instructions".into()))?;
        let answer = model.answer(&s.frames[0], &qa.instruction, ANSWER_TOKENS)?;
        let conditioned = crate::scene_synth::QAPair { answer, ..qa.clone() };
        let mut g = Graph::new();
        let out = model.joint_forward(&mut g, &s.frames[0], &s.motions, &conditioned)?;
        Ok(out.grids.iter().map(|&v| g.value(v).clone()).collect())
    } else {
        let mut g = Graph::new();
        let enc = model.encode(&mut g, &s.frames[0].pixels);
        let grid = model.zero_grid(&mut g, &enc, None, ZeroPath::Compressed);
        Ok(vec![g.value(grid).clone()])
    }
}

/// Decoding budget for templated answers.
pub const ANSWER_TOKENS: usize = 6;

pub fn evaluate(model: &WorldModel, completed_stage: u8, samples: &[Sample], roi: &Roi, digest: &str) -> Result<EvalReport> {
    roi.validate()?;
    if samples.is_empty() {
        return Err(Error::Empty("no evaluation samples".into()));
    }
    let horizons = if completed_stage >= 3 { model.cfg.horizon + 1 } else { 1 };
    let mut sums = vec![0.0; horizons];
    let (mut correct, mut rouge, mut questions) = (0usize, 0.0, 0usize);
    for s in samples {
        let grids = predict_grids(model, completed_stage, s)?;
        for (i, grid) in grids.iter().enumerate().take(horizons) {
            let frame = &s.frames[i];
            let pred = roi_filter(&model.query_cloud(grid, &frame.lidar, 512)?, roi);
            let gt = roi_filter(&valid_cloud(model, frame), roi);
            sums[i] += chamfer(&nonempty(pred, frame.lidar.origin), &gt)?;
        }
        if completed_stage >= 2 {
            for qa in &s.qa {
                let a = model.answer(&s.frames[0], &qa.instruction, ANSWER_TOKENS)?;
                correct += usize::from(a == qa.answer);
                rouge += rouge_l(&a, &qa.answer);
                questions += 1;
            }
        }
    }
    let n = samples.len() as f64;
    let q = questions.max(1) as f64;
    Ok(EvalReport {
        chamfer: sums.iter().map(|s| s / n).collect(),
        rouge_l: if questions > 0 { rouge / q } else { f64::NAN },
        answer_accuracy: if questions > 0 { correct as f64 / q } else { f64::NAN },
        roi: *roi,
        config_digest: digest.to_string(),
        frames: samples.len(),
        questions,
    })
}

/// Mean held-out L1 depth error of extractor reconstructions (stage-1a check).
pub fn reconstruction_error(model: &WorldModel, samples: &[Sample]) -> Result<f64> {
    let (mut sum, mut count) = (0.0, 0usize);
    for s in samples {
        let frame = &s.frames[0];
        let valid = model.valid_rays(&frame.lidar);
        let (dirs, gt): (Vec<_>, Vec<_>) = valid
            .iter()
            .enumerate()
            .filter(|(_, &v)| v)
            .map(|(k, _)| (frame.lidar.directions[k], frame.lidar.gt_depths[k]))
            .unzip();
        if dirs.is_empty() {
            continue;
        }
        let mut g = Graph::new();
        let rows = model.extractor_rows(&mut g, &frame.occupancy);
        let (d, _) = model.render_rows::<ChaCha8Rng>(&mut g, rows, &dirs, None)?;
        sum += g.value(d).data().iter().zip(&gt).map(|(a, b)| (a - b).abs()).sum::<f64>();
        count += gt.len();
    }
    if count == 0 {
        return Err(Error::Empty("no valid rays in held-out frames".into()));
    }
    Ok(sum / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene_synth::generate_dataset;

    fn tiny() -> RunConfig {
        let mut r = RunConfig::ci();
        r.sequences = 3;
        r.steps = [3, 3, 2, 2, 3];
        r.rays_per_frame = 16;
        r.model.samples_per_ray = 8;
        r
    }

    fn setup(run: &RunConfig) -> (Trainer, Vec<Sample>) {
        let ds = generate_dataset(&run.scene, run.data_seed, run.sequences, run.model.extent).unwrap();
        let model = WorldModel::new(&run.model, run.scene.dt_seconds, run.seed).unwrap();
        let samples = prepare_samples(&ds, &model, 0..2).unwrap();
        (Trainer::new(model, run.clone()), samples)
    }

    #[test]
    fn config_round_trip_and_unknown_keys() {
        let r = RunConfig::ci();
        let back = RunConfig::from_key_values(&r.to_key_values()).unwrap();
        assert_eq!(back, r);
        assert_eq!(back.digest(), r.digest());
        let mut kv = r.to_key_values();
        kv.set("train.bogus", 1);
        assert!(matches!(RunConfig::from_key_values(&kv), Err(Error::Config(_))));
        let mut kv = r.to_key_values();
        kv.set("train.steps_2b", 17);
        kv.set("loss.gram", "off");
        let c = RunConfig::from_key_values(&kv).unwrap();
        assert_eq!(c.steps[Phase::Language.index()], 17);
        assert!(!c.loss_gram);
        assert_ne!(c.digest(), r.digest());
    }

    #[test]
    fn stages_are_gated() {
        let run = tiny();
        let (mut t, samples) = setup(&run);
        let mut sink = |_: &LogRow| {};
        assert!(matches!(t.train_stage(3, &samples, &mut sink), Err(Error::Stage(_))));
        assert!(matches!(t.train_stage(2, &samples, &mut sink), Err(Error::Stage(_))));
        t.train_stage(1, &samples, &mut sink).unwrap();
        assert!(matches!(t.train_stage(1, &samples, &mut sink), Err(Error::Stage(_))));
        assert!(matches!(t.train_stage(3, &samples, &mut sink), Err(Error::Stage(_))));
    }

    #[test]
    fn frozen_sets_never_move_and_lambdas_are_logged() {
        let run = tiny();
        let (mut t, samples) = setup(&run);
        let mut rows = Vec::new();
        for stage in 1..=3 {
            for &phase in Phase::of_stage(stage) {
                let before = t.model.store.clone();
                t.begin_phase(phase);
                t.continue_phase(&samples, &mut |r: &LogRow| rows.push(r.clone())).unwrap();
                assert_eq!(t.frozen_update_norm(&before, phase), 0.0, "phase {}", phase.name());
            }
            t.completed_stage = stage;
        }
        let joint: Vec<_> = rows.iter().filter(|r| r.phase == Phase::Joint).collect();
        assert_eq!(joint.len(), 3);
        for r in &joint {
            assert_eq!(r.lambda, vec![1.0, 1.5, 2.0, 2.5]);
            assert_eq!(r.extractor_grad, 0.0);
            assert!(r.render.iter().all(Option::is_some));
            assert!(r.lang.is_some() && r.cos.is_some() && r.gram.is_some());
        }
        assert!(rows.iter().filter(|r| r.phase == Phase::Geometry).all(|r| r.extractor_grad > 0.0));
        let csv = joint[0].csv();
        assert_eq!(csv.split(',').count(), LogRow::csv_header(3).split(',').count());
        let report = evaluate(&t.model, 3, &samples[..1], &Roi::scaled(run.model.extent), "x").unwrap();
        assert_eq!(report.chamfer.len(), 4);
        assert_eq!(report.questions, 8);
    }

    #[test]
    fn stage_one_eval_reports_current_frame_only() {
        let run = tiny();
        let (t, samples) = setup(&run);
        let r = evaluate(&t.model, 1, &samples[..1], &Roi::full(), "d").unwrap();
        assert_eq!(r.chamfer.len(), 1);
        assert!(r.answer_accuracy.is_nan());
        assert!(reconstruction_error(&t.model, &samples[..1]).unwrap() > 0.0);
    }
}
