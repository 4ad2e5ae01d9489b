//! The assembled world model and the per-frame inputs it consumes.

use std::collections::HashMap;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::bev_tokenizer::{stack_views, BevTokenizer, LiftPlan};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::future_link::{BevHead, FutureLink};
use crate::geometry_opt::{voxelize, GeometryExtractor, GramPooling, EXTRACTOR_PREFIX};
use crate::language_core::{build_text, LanguageCore, Vocab, WorldQueryBuilder};
use crate::render::{plan_samples, render_pointcloud, weight_sums, PointCloud, Renderer};
use crate::scene_synth::{
    cast_lidar, render_camera_views, surround_cameras, CameraConfig, Dataset, EgoMotion, QAPair, RayBundle,
};
use crate::tensor::Tensor;

/// Parameter groups, keyed by name prefix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Extractor,
    Tokenizer,
    Projector,
    Language,
    Queries,
    Link,
    BevHead,
    Render,
    RenderHead,
}

impl ParamGroup {
    pub fn of(name: &str) -> Self {
        if name.starts_with(EXTRACTOR_PREFIX) {
            Self::Extractor
        } else if name.starts_with("bev.proj") {
            Self::Projector
        } else if name.starts_with("bev.") {
            Self::Tokenizer
        } else if name.starts_with("lm.") {
            Self::Language
        } else if name.starts_with("wq.") {
            Self::Queries
        } else if name.starts_with("link.") {
            Self::Link
        } else if name.starts_with("bev_out") {
            Self::BevHead
        } else if name.starts_with("render.sdf") || name.starts_with("render.log_tau") {
            Self::RenderHead
        } else {
            Self::Render
        }
    }
}

/// Where the current-frame render takes its features from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ZeroPath {
    /// Downsampled BEV straight into the upsampler.
    Compressed,
    /// LLM-processed BEV states through the out-projection.
    LlmStates,
}

#[derive(Clone, Debug)]
pub struct WorldModel {
    pub cfg: ModelConfig,
    pub vocab: Vocab,
    pub store: ParamStore,
    pub cameras: Vec<CameraConfig>,
    pub plan: LiftPlan,
    pub tokenizer: BevTokenizer,
    pub lm: LanguageCore,
    pub queries: WorldQueryBuilder,
    pub link: FutureLink,
    pub head: BevHead,
    pub renderer: Renderer,
    pub extractor: GeometryExtractor,
    pub pooling: GramPooling,
}

impl WorldModel {
    /// Parameters are drawn in a fixed order from `seed`, so the same config
    /// and seed always yield the same names, shapes and values.
    pub fn new(cfg: &ModelConfig, dt_seconds: f64, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let vocab = Vocab::templates();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let cameras = surround_cameras(cfg.cam_width, cfg.cam_height, cfg.lidar.max_range);
        let plan = LiftPlan::build(cfg.bev_w, cfg.extent, &cameras, &cfg.height_anchors)?;
        let tokenizer = BevTokenizer::new(&mut store, cfg, CameraConfig::channels(), &mut rng);
        let lm = LanguageCore::new(&mut store, cfg, vocab.len(), &mut rng);
        let queries = WorldQueryBuilder::new(&mut store, cfg, dt_seconds, &mut rng);
        let link = FutureLink::new(&mut store, cfg, &mut rng);
        let head = BevHead::new(&mut store, cfg, &mut rng);
        let renderer = Renderer::new(&mut store, cfg, &mut rng);
        let extractor = GeometryExtractor::new(&mut store, cfg, &mut rng);
        let pooling = GramPooling::from_geometry(&renderer.geo);
        Ok(Self {
            cfg: cfg.clone(),
            vocab,
            store,
            cameras,
            plan,
            tokenizer,
            lm,
            queries,
            link,
            head,
            renderer,
            extractor,
            pooling,
        })
    }

    pub fn ids_in(&self, groups: &[ParamGroup]) -> Vec<ParamId> {
        self.store
            .iter()
            .filter(|(_, e)| groups.contains(&ParamGroup::of(&e.name)))
            .map(|(id, _)| id)
            .collect()
    }

    /// Valid training rays: a return inside the sampled depth range.
    pub fn valid_rays(&self, lidar: &RayBundle) -> Vec<bool> {
        lidar
            .gt_depths
            .iter()
            .map(|&d| d.is_finite() && d >= self.cfg.depth_min && d <= self.cfg.depth_max)
            .collect()
    }

    /// Camera pixels → compressed map `[4c, w/4, h/4]`, its rows and LLM tokens.
    pub fn encode(&self, g: &mut Graph, pixels: &Tensor) -> Encoded {
        let px = g.constant(pixels.clone());
        let cells = self.tokenizer.lift(g, &self.store, px, &self.plan);
        let comp = self.tokenizer.downsample(g, &self.store, cells);
        let rows = self.tokenizer.compressed_rows(g, comp);
        let tokens = self.tokenizer.project(g, &self.store, rows);
        Encoded { comp, rows, tokens }
    }

    /// Renders `directions` against a `[z·c', w, h]` grid. Returns the depth
    /// column, the SDF samples and the volume rows used for latent alignment.
    pub fn render_grid<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        grid: Var,
        directions: &[[f64; 3]],
        jitter: Option<&mut R>,
    ) -> Result<(Var, Var, Var)> {
        let vol = self.renderer.expand(g, &self.store, grid)?;
        let rows = self.renderer.volume_rows(g, vol);
        let (d, s) = self.render_rows(g, rows, directions, jitter)?;
        Ok((d, s, rows))
    }

    pub fn render_rows<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        rows: Var,
        directions: &[[f64; 3]],
        jitter: Option<&mut R>,
    ) -> Result<(Var, Var)> {
        let range = (self.cfg.depth_min, self.cfg.depth_max);
        let plan = plan_samples(&self.renderer.geo, directions, self.cfg.samples_per_ray, range, jitter)?;
        Ok(self.renderer.render(g, &self.store, rows, &plan))
    }

    /// Frozen-extractor features `[voxels, c']` for an occupancy grid. The
    /// forward runs on the caller's tape so gradient audits see the extractor
    /// parameters; only the value leaves, so no loss can reach them.
    pub fn target_rows(&self, g: &mut Graph, occupancy: &Tensor) -> Tensor {
        let occ = g.constant(occupancy.clone());
        let vol = self.extractor.forward(g, &self.store, occ);
        let rows = self.renderer.volume_rows(g, vol);
        g.value(rows).clone()
    }

    /// Extractor volume rows with gradient, for reconstruction pretraining.
    pub fn extractor_rows(&self, g: &mut Graph, occupancy: &Tensor) -> Var {
        let occ = g.constant(occupancy.clone());
        let vol = self.extractor.forward(g, &self.store, occ);
        self.renderer.volume_rows(g, vol)
    }

    /// Current-frame grid for the chosen path.
    pub fn zero_grid(&self, g: &mut Graph, enc: &Encoded, bev_states: Option<Var>, path: ZeroPath) -> Var {
        match (path, bev_states) {
            (ZeroPath::LlmStates, Some(b)) => self.head.grid(g, &self.store, &self.renderer, b),
            _ => self.renderer.upsample(g, &self.store, enc.comp),
        }
    }

    /// Full pass: language logits over the QA text and one grid per horizon,
    /// index 0 being the current frame.
    pub fn joint_forward(&self, g: &mut Graph, frame: &FrameInput, motions: &[EgoMotion], qa: &QAPair) -> Result<JointOutputs> {
        let enc = self.encode(g, &frame.pixels);
        let (text, targets) = build_text(&self.vocab, &qa.instruction, Some(&qa.answer));
        let q = self.queries.build(g, &self.store, enc.rows, self.cfg.compressed_w(), motions)?;
        let out = self.lm.forward(g, &self.store, enc.tokens, &text, Some(q.projected))?;
        let enriched = out.queries.expect("queries were fed");
        let mut grids = vec![self.head.grid(g, &self.store, &self.renderer, out.bev)];
        let future = self.link.propagate(
            g,
            &self.store,
            &self.head,
            &self.renderer,
            out.bev,
            enriched,
            out.pooled_text,
            motions,
        )?;
        grids.extend(future.grids);
        Ok(JointOutputs { logits: out.logits, targets, grids })
    }

    /// Greedy answer for an instruction about the frame.
    pub fn answer(&self, frame: &FrameInput, instruction: &str, max_new: usize) -> Result<String> {
        let mut g = Graph::new();
        let enc = self.encode(&mut g, &frame.pixels);
        let bev = g.value(enc.tokens).clone();
        let (prompt, _) = build_text(&self.vocab, instruction, None);
        let ids = self.lm.decode_greedy(&self.store, &bev, &prompt, max_new)?;
        Ok(self.vocab.decode(&ids))
    }

    /// Expected depth along every ray with a ground-truth return in range,
    /// as sensor-frame points. Transparent rays land at the origin.
    pub fn query_cloud(&self, grid: &Tensor, lidar: &RayBundle, chunk: usize) -> Result<PointCloud> {
        let valid = self.valid_rays(lidar);
        let dirs: Vec<[f64; 3]> = lidar.directions.iter().zip(&valid).filter(|(_, &v)| v).map(|(d, _)| *d).collect();
        let mut g = Graph::new();
        let gv = g.constant(grid.clone());
        let vol = self.renderer.expand(&mut g, &self.store, gv)?;
        let rows = self.renderer.volume_rows(&mut g, vol);
        let rows_t = g.value(rows).clone();
        let mut points = Vec::with_capacity(dirs.len());
        for part in dirs.chunks(chunk.max(1)) {
            let mut g = Graph::new();
            let r = g.constant(rows_t.clone());
            let (d, _) = self.render_rows::<ChaCha8Rng>(&mut g, r, part, None)?;
            let o = lidar.origin;
            points.extend(
                part.iter()
                    .zip(g.value(d).data())
                    .map(|(t, &d)| [o[0] + d * t[0], o[1] + d * t[1], o[2] + d * t[2]]),
            );
        }
        Ok(PointCloud { points })
    }

    /// Thresholded point cloud over every ray of the pattern, sensor frame.
    pub fn predict_cloud(&self, grid: &Tensor, lidar: &RayBundle, chunk: usize) -> Result<PointCloud> {
        let mut g = Graph::new();
        let gv = g.constant(grid.clone());
        let vol = self.renderer.expand(&mut g, &self.store, gv)?;
        let rows = self.renderer.volume_rows(&mut g, vol);
        let rows_t = g.value(rows).clone();
        let tau = self.renderer.tau(&self.store);
        let mut points = Vec::new();
        for dirs in lidar.directions.chunks(chunk.max(1)) {
            let mut g = Graph::new();
            let r = g.constant(rows_t.clone());
            let range = (self.cfg.depth_min, self.cfg.depth_max);
            let plan = plan_samples::<ChaCha8Rng>(&self.renderer.geo, dirs, self.cfg.samples_per_ray, range, None)?;
            let (d, s) = self.renderer.render(&mut g, &self.store, r, &plan);
            let ws = weight_sums(g.value(s).data(), &plan.depths, plan.n, tau);
            let cloud = render_pointcloud(lidar.origin, dirs, g.value(d).data(), &ws, self.cfg.weight_threshold);
            points.extend(cloud.points);
        }
        Ok(PointCloud { points })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    pub comp: Var,
    pub rows: Var,
    pub tokens: Var,
}

#[derive(Clone, Debug)]
pub struct JointOutputs {
    pub logits: Var,
    pub targets: Vec<Option<usize>>,
    /// `Δt + 1` grids, current frame first.
    pub grids: Vec<Var>,
}

/// Everything the model reads for one frame.
#[derive(Clone, Debug)]
pub struct FrameInput {
    /// Stacked camera rows `[cams·H·W, C]`.
    pub pixels: Tensor,
    pub lidar: RayBundle,
    /// `[1, z, w, h]` occupancy of the ground-truth returns.
    pub occupancy: Tensor,
}

impl FrameInput {
    pub fn cloud(&self) -> PointCloud {
        PointCloud { points: self.lidar.points() }
    }
}

/// One training/eval sample: frame `t` of a sequence and its horizon.
#[derive(Clone, Debug)]
pub struct Sample {
    pub sequence: usize,
    pub t: usize,
    /// Frames `t..=t+Δt`.
    pub frames: Vec<Rc<FrameInput>>,
    pub motions: Vec<EgoMotion>,
    pub qa: Vec<QAPair>,
}

/// Renders camera views and LiDAR for every frame a sample needs.
pub fn prepare_samples(ds: &Dataset, model: &WorldModel, sequences: std::ops::Range<usize>) -> Result<Vec<Sample>> {
    let cfg = &model.cfg;
    let horizon = cfg.horizon;
    if sequences.end > ds.records.len() {
        return Err(Error::InvalidArgument(format!(
            "sequence range {sequences:?} exceeds {} records",
            ds.records.len()
        )));
    }
    let mut out = Vec::new();
    for si in sequences {
        let rec = &ds.records[si];
        let seq = &rec.sequence;
        if seq.frames.len() < horizon + 1 {
            return Err(Error::InvalidArgument(format!(
                "sequence {si} has {} frames, fewer than Δt + 1 = {}",
                seq.frames.len(),
                horizon + 1
            )));
        }
        let mut cache: HashMap<usize, Rc<FrameInput>> = HashMap::new();
        let mut frame = |f: usize| {
            cache
                .entry(f)
                .or_insert_with(|| {
                    let fr = &seq.frames[f];
                    let views = render_camera_views(fr, &model.cameras, cfg.lidar.sensor_height);
                    let lidar = cast_lidar(fr, &cfg.lidar);
                    let occupancy = voxelize(&PointCloud { points: lidar.points() }, &model.renderer.geo);
                    Rc::new(FrameInput { pixels: stack_views(&views), lidar, occupancy })
                })
                .clone()
        };
        for t in 0..seq.frames.len() - horizon {
            let frames = (t..=t + horizon).map(&mut frame).collect();
            out.push(Sample {
                sequence: si,
                t,
                frames,
                motions: seq.ego_motions(t, horizon),
                qa: rec.qa.iter().filter(|q| q.frame_index == t).cloned().collect(),
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene_synth::{generate_dataset, SceneConfig};

    fn small() -> (WorldModel, Dataset) {
        let cfg = ModelConfig::ci();
        let scene = SceneConfig { extent: cfg.extent, static_boxes: 3, dynamic_boxes: 1, ..SceneConfig::default() };
        let ds = generate_dataset(&scene, 3, 2, cfg.extent).unwrap();
        (WorldModel::new(&cfg, 1.0, 1).unwrap(), ds)
    }

    #[test]
    fn construction_is_deterministic() {
        let cfg = ModelConfig::ci();
        let a = WorldModel::new(&cfg, 1.0, 5).unwrap();
        let b = WorldModel::new(&cfg, 1.0, 5).unwrap();
        assert_eq!(a.store.len(), b.store.len());
        for ((_, x), (_, y)) in a.store.iter().zip(b.store.iter()) {
            assert_eq!(x.name, y.name);
            assert_eq!(x.value, y.value);
        }
        assert!(a.ids_in(&[ParamGroup::Extractor]).len() == 6);
    }

    #[test]
    fn samples_cover_full_horizons() {
        let (m, ds) = small();
        let s = prepare_samples(&ds, &m, 0..2).unwrap();
        let per = ds.records[0].sequence.frames.len() - m.cfg.horizon;
        assert_eq!(s.len(), 2 * per);
        assert!(s.iter().all(|x| x.frames.len() == 4 && x.motions.len() == 3 && x.qa.len() == 8));
        assert!(Rc::ptr_eq(&s[0].frames[1], &s[1].frames[0]));
    }

    #[test]
    fn joint_forward_shapes() {
        let (m, ds) = small();
        let s = &prepare_samples(&ds, &m, 0..1).unwrap()[0];
        let mut g = Graph::new();
        let out = m.joint_forward(&mut g, &s.frames[0], &s.motions, &s.qa[0]).unwrap();
        assert_eq!(out.grids.len(), 4);
        let zc = m.cfg.vol_z * m.cfg.vol_c;
        for gr in &out.grids {
            assert_eq!(g.shape(*gr), &[zc, m.cfg.bev_w, m.cfg.bev_w]);
        }
        // Fresh link: every future grid equals the current one.
        for gr in &out.grids[1..] {
            assert!(g.value(*gr).max_abs_diff(g.value(out.grids[0])) < 1e-10);
        }
        let dirs = &s.frames[0].lidar.directions[..10];
        let (d, _, rows) = m.render_grid::<ChaCha8Rng>(&mut g, out.grids[0], dirs, None).unwrap();
        assert_eq!(g.shape(d), &[10, 1]);
        assert_eq!(g.shape(rows), &[m.renderer.geo.voxels(), m.cfg.vol_c]);
        let t = m.target_rows(&mut g, &s.frames[0].occupancy);
        assert_eq!(t.shape(), g.shape(rows));
    }

    #[test]
    fn predicted_cloud_and_answer_run() {
        let (m, ds) = small();
        let s = &prepare_samples(&ds, &m, 0..1).unwrap()[0];
        let mut g = Graph::new();
        let enc = m.encode(&mut g, &s.frames[0].pixels);
        let grid = m.zero_grid(&mut g, &enc, None, ZeroPath::Compressed);
        let cloud = m.predict_cloud(g.value(grid), &s.frames[0].lidar, 97).unwrap();
        assert!(cloud.len() <= s.frames[0].lidar.len());
        let a = m.answer(&s.frames[0], &s.qa[0].instruction, 4).unwrap();
        assert!(a.split_whitespace().count() <= 4);
    }
}
