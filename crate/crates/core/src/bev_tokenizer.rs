//! Camera-to-BEV lift, 4× compression and projection into language tokens.
//!
//! Cells are stored row-major with `x` (forward) as the slow axis, so a
//! `[w·h, c]` row matrix reshapes directly to a `(w, h, c)` grid.

use std::rc::Rc;

use rand::Rng;

use crate::autograd::{Graph, ParamId, ParamStore, SparseTaps, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{Conv, Init, Linear};
use crate::scene_synth::{CameraConfig, FeatureMap};
use crate::tensor::Tensor;

/// `(w, h, c)` top-down feature map centred on the ego.
#[derive(Clone, Debug, PartialEq)]
pub struct BEVGrid {
    pub features: Tensor,
    pub resolution_m: f64,
}

/// `(w/4, h/4, 4c)` compressed grid.
#[derive(Clone, Debug, PartialEq)]
pub struct CompressedBEV {
    pub features: Tensor,
}

/// `(L_BEV, C_llm)` tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct BEVTokenSeq {
    pub tokens: Tensor,
}

/// Fixed sampling pattern from camera pixels to BEV cell keys.
///
/// Depends only on calibration, anchors and grid geometry, so it is built
/// once and reused for every frame.
#[derive(Clone, Debug)]
pub struct LiftPlan {
    pub cells: usize,
    /// Bilinear taps into the stacked `[cams·H·W, C]` pixel rows, one row per key.
    pub taps: Rc<SparseTaps>,
    /// Normalized reference range per key, `[keys, 1]`.
    pub key_range: Tensor,
    /// Owning cell of each key.
    pub owner: Rc<Vec<usize>>,
    /// `[cells, 1]`; 1 where no camera sees the cell.
    pub unseen: Tensor,
    /// Cameras contributing at least one key to each cell.
    pub seen_by: Vec<Vec<usize>>,
    pub pixels: usize,
}

/// Centre of cell `(ix, iy)` in ego metres.
pub fn cell_center(ix: usize, iy: usize, w: usize, extent: f64) -> (f64, f64) {
    let cell = 2.0 * extent / w as f64;
    (-extent + (ix as f64 + 0.5) * cell, -extent + (iy as f64 + 0.5) * cell)
}

impl LiftPlan {
    pub fn build(
        w: usize,
        extent: f64,
        cameras: &[CameraConfig],
        anchors: &[f64],
    ) -> Result<Self> {
        if cameras.is_empty() {
            return Err(Error::InvalidArgument("lift needs at least one camera".into()));
        }
        if anchors.is_empty() {
            return Err(Error::InvalidArgument("lift needs at least one height anchor".into()));
        }
        let inverses = cameras
            .iter()
            .map(CameraConfig::ego_to_camera)
            .collect::<Result<Vec<_>>>()?;
        let mut offsets = Vec::with_capacity(cameras.len());
        let mut pixels = 0;
        for c in cameras {
            offsets.push(pixels);
            pixels += c.width * c.height;
        }
        let cells = w * w;
        let mut taps = SparseTaps::new();
        let mut key_range = Vec::new();
        let mut owner = Vec::new();
        let mut unseen = vec![1.0; cells];
        let mut seen_by = vec![Vec::new(); cells];
        for ix in 0..w {
            for iy in 0..w {
                let cell = ix * w + iy;
                let (x, y) = cell_center(ix, iy, w, extent);
                for (ci, (cam, inv)) in cameras.iter().zip(&inverses).enumerate() {
                    for &z in anchors {
                        let Some((u, v, range)) = cam.project(inv, [x, y, z]) else {
                            continue;
                        };
                        if !(u >= 0.0 && u <= cam.width as f64 && v >= 0.0 && v <= cam.height as f64) {
                            continue;
                        }
                        push_bilinear(&mut taps, offsets[ci], cam.width, cam.height, u, v);
                        key_range.push(range / cam.max_range);
                        owner.push(cell);
                        unseen[cell] = 0.0;
                        if seen_by[cell].last() != Some(&ci) {
                            seen_by[cell].push(ci);
                        }
                    }
                }
            }
        }
        let keys = owner.len();
        Ok(Self {
            cells,
            taps: Rc::new(taps),
            key_range: Tensor::from_vec(&[keys, 1], key_range),
            owner: Rc::new(owner),
            unseen: Tensor::from_vec(&[cells, 1], unseen),
            seen_by,
            pixels,
        })
    }

    pub fn keys(&self) -> usize {
        self.owner.len()
    }
}

/// Border-clamped bilinear lookup at continuous pixel coordinates.
fn push_bilinear(taps: &mut SparseTaps, base: usize, width: usize, height: usize, u: f64, v: f64) {
    let (fx, fy) = (u - 0.5, v - 0.5);
    let (x0, y0) = (fx.floor(), fy.floor());
    let (ax, ay) = (fx - x0, fy - y0);
    let clamp = |i: f64, n: usize| (i.max(0.0) as usize).min(n - 1);
    for (dy, wy) in [(0.0, 1.0 - ay), (1.0, ay)] {
        for (dx, wx) in [(0.0, 1.0 - ax), (1.0, ax)] {
            let wgt = wx * wy;
            if wgt != 0.0 {
                let px = clamp(x0 + dx, width);
                let py = clamp(y0 + dy, height);
                taps.push(base + py * width + px, wgt);
            }
        }
    }
    taps.finish_row();
}

/// Stacks channel-major camera maps into `[cams·H·W, C]` pixel rows.
pub fn stack_views(views: &[FeatureMap]) -> Tensor {
    let c = views.first().map_or(0, |v| v.channels);
    let pixels: usize = views.iter().map(|v| v.height * v.width).sum();
    let mut data = Vec::with_capacity(pixels * c);
    for v in views {
        assert_eq!(v.channels, c, "camera channel counts differ");
        for p in 0..v.height * v.width {
            data.extend((0..c).map(|ch| v.data[ch * v.height * v.width + p]));
        }
    }
    Tensor::from_vec(&[pixels, c], data)
}

#[derive(Clone, Debug)]
pub struct BevTokenizer {
    pub grid_queries: ParamId,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub down1: Conv,
    pub down2: Conv,
    pub proj: Linear,
    pub w: usize,
    pub c: usize,
}

impl BevTokenizer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        cfg: &ModelConfig,
        cam_channels: usize,
        rng: &mut R,
    ) -> Self {
        let (w, c) = (cfg.bev_w, cfg.bev_c);
        let grid_queries = store.add("bev.queries", Tensor::randn(&[w * w, c], 0.5, rng));
        Self {
            grid_queries,
            q: Linear::new(store, "bev.attn.q", c, c, true, Init::Default, rng),
            k: Linear::new(store, "bev.attn.k", cam_channels + 1, c, true, Init::Default, rng),
            v: Linear::new(store, "bev.attn.v", cam_channels + 1, c, true, Init::Default, rng),
            down1: Conv::new(store, "bev.down1", 2, c, 2 * c, 3, 2, 1, Init::Default, rng),
            down2: Conv::new(store, "bev.down2", 2, 2 * c, 4 * c, 3, 2, 1, Init::Default, rng),
            proj: Linear::new(store, "bev.proj", 4 * c, cfg.llm_dim, true, Init::Default, rng),
            w,
            c,
        }
    }

    /// Cross-attention from grid queries to their projected pixel features.
    /// `pixels` is the `[cams·H·W, C]` output of [`stack_views`]; returns
    /// `[w·h, c]` cell rows.
    pub fn lift(&self, g: &mut Graph, store: &ParamStore, pixels: Var, plan: &LiftPlan) -> Var {
        let queries = g.param(store, self.grid_queries);
        let sampled = g.sparse_rows(pixels, plan.taps.clone());
        let range = g.constant(plan.key_range.clone());
        let kv_in = g.concat_cols(&[sampled, range]);
        let q = self.q.forward(g, store, queries);
        let k = self.k.forward(g, store, kv_in);
        let v = self.v.forward(g, store, kv_in);
        let scale = 1.0 / (self.c as f64).sqrt();
        let attended = g.segment_attention(q, k, v, plan.owner.clone(), scale);
        let unseen = g.constant(plan.unseen.clone());
        let kept = g.mul_col(queries, unseen);
        g.add(attended, kept)
    }

    /// `[w·h, c]` rows → `[4c, w/4, h/4]` channel-major compressed map.
    pub fn downsample(&self, g: &mut Graph, store: &ParamStore, cells: Var) -> Var {
        let t = g.transpose(cells);
        let x = g.reshape(t, &[self.c, self.w, self.w]);
        let x = self.down1.forward(g, store, x);
        let x = g.relu(x);
        self.down2.forward(g, store, x)
    }

    /// Channel-major compressed map → `[L, 4c]` rows in row-major cell order.
    pub fn compressed_rows(&self, g: &mut Graph, comp: Var) -> Var {
        let s = g.shape(comp).to_vec();
        let flat = g.reshape(comp, &[s[0], s[1] * s[2]]);
        g.transpose(flat)
    }

    /// Flattened compressed rows → `[L, C_llm]` tokens via the single map φ.
    pub fn project(&self, g: &mut Graph, store: &ParamStore, rows: Var) -> Var {
        self.proj.forward(g, store, rows)
    }
}

fn run_graph<F: FnOnce(&mut Graph) -> Var>(f: F) -> Tensor {
    let mut g = Graph::new();
    let v = f(&mut g);
    g.value(v).clone()
}

pub fn lift_to_bev(
    tok: &BevTokenizer,
    store: &ParamStore,
    views: &[FeatureMap],
    calib: &[CameraConfig],
    height_anchors: &[f64],
    extent: f64,
) -> Result<BEVGrid> {
    if views.len() != calib.len() {
        return Err(Error::InvalidArgument(format!(
            "{} views for {} cameras",
            views.len(),
            calib.len()
        )));
    }
    let plan = LiftPlan::build(tok.w, extent, calib, height_anchors)?;
    let rows = run_graph(|g| {
        let px = g.constant(stack_views(views));
        tok.lift(g, store, px, &plan)
    });
    Ok(BEVGrid {
        features: rows.reshape(&[tok.w, tok.w, tok.c]),
        resolution_m: 2.0 * extent / tok.w as f64,
    })
}

pub fn downsample_bev(tok: &BevTokenizer, store: &ParamStore, grid: &BEVGrid) -> Result<CompressedBEV> {
    let s = grid.features.shape();
    if s[0] % 4 != 0 || s[1] % 4 != 0 {
        return Err(Error::Shape(format!("BEV dims {}x{} are not divisible by 4", s[0], s[1])));
    }
    if s[0] != tok.w || s[1] != tok.w || s[2] != tok.c {
        return Err(Error::Shape(format!("grid {s:?} does not match tokenizer")));
    }
    let rows = run_graph(|g| {
        let cells = g.constant(grid.features.clone().reshape(&[s[0] * s[1], s[2]]));
        let comp = tok.downsample(g, store, cells);
        tok.compressed_rows(g, comp)
    });
    Ok(CompressedBEV {
        features: rows.reshape(&[s[0] / 4, s[1] / 4, 4 * s[2]]),
    })
}

pub fn flatten_project(tok: &BevTokenizer, store: &ParamStore, comp: &CompressedBEV) -> BEVTokenSeq {
    let s = comp.features.shape();
    let tokens = run_graph(|g| {
        let rows = g.constant(comp.features.clone().reshape(&[s[0] * s[1], s[2]]));
        tok.project(g, store, rows)
    });
    BEVTokenSeq { tokens }
}
