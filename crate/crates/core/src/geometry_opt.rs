//! Joint geometric optimization: explicit depth L1 plus latent alignment
//! against a frozen geometry extractor.
//!
//! All volume losses work on `[w·h·z, c']` voxel rows (see [`crate::render`]).
//! Gram perspectives pool with a mean over the dropped axis:
//!
//! | perspective | pooled axis | rows (slow → fast) |
//! |-------------|-------------|--------------------|
//! | HW          | z           | x, y               |
//! | HZ          | y           | x, z               |
//! | WZ          | x           | y, z               |
//!
//! Each pooled map is `[rows, c']` and its Gram matrix is `M Mᵀ`.

use std::rc::Rc;

use rand::Rng;

use crate::autograd::{Graph, ParamStore, SparseTaps, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{Conv, Init};
use crate::render::{PointCloud, VolumeGeometry};
use crate::tensor::Tensor;

pub const COS_EPS: f64 = 1e-8;

/// Render-loss weight for horizon `i` (0 is the current frame).
pub fn horizon_weight(i: usize) -> f64 {
    1.0 + 0.5 * i as f64
}

/// Binary occupancy `[1, z, w, h]` of the points inside the volume.
pub fn voxelize(cloud: &PointCloud, geo: &VolumeGeometry) -> Tensor {
    let mut occ = Tensor::zeros(&[1, geo.z, geo.w, geo.w]);
    for p in &cloud.points {
        if let Some((ix, iy, iz)) = geo.voxel_of(*p) {
            occ.data_mut()[(iz * geo.w + ix) * geo.w + iy] = 1.0;
        }
    }
    occ
}

/// Dense three-layer 3-D convolutional encoder.
#[derive(Clone, Debug)]
pub struct GeometryExtractor {
    pub convs: [Conv; 3],
}

pub const EXTRACTOR_PREFIX: &str = "extractor.";

impl GeometryExtractor {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Self {
        let (w, c) = (cfg.extractor_width, cfg.vol_c);
        let conv = |store: &mut ParamStore, name: &str, i, o, rng: &mut R| {
            Conv::new(store, &format!("{EXTRACTOR_PREFIX}{name}"), 3, i, o, 3, 1, 1, Init::Default, rng)
        };
        Self {
            convs: [
                conv(store, "0", 1, w, rng),
                conv(store, "1", w, w, rng),
                conv(store, "2", w, c, rng),
            ],
        }
    }

    /// Occupancy `[1, z, w, h]` → features `[c', z, w, h]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, occupancy: Var) -> Var {
        let mut x = occupancy;
        for (i, conv) in self.convs.iter().enumerate() {
            x = conv.forward(g, store, x);
            if i + 1 < self.convs.len() {
                x = g.silu(x);
            }
        }
        x
    }
}

/// `λ_i · mean |gt − pred|` over rays flagged valid.
pub fn render_loss(g: &mut Graph, pred: Var, gt: &[f64], valid: &[bool], horizon: usize) -> Result<Var> {
    let n_valid = valid.iter().filter(|&&v| v).count();
    if n_valid == 0 {
        return Err(Error::Empty("render loss has no valid rays".into()));
    }
    let target: Vec<f64> = gt.iter().zip(valid).map(|(&d, &v)| if v { d } else { 0.0 }).collect();
    let weights: Vec<f64> = valid
        .iter()
        .map(|&v| if v { horizon_weight(horizon) / n_valid as f64 } else { 0.0 })
        .collect();
    let t = g.constant(Tensor::from_vec(&[gt.len(), 1], target));
    let diff = g.sub(pred, t);
    let a = g.abs(diff);
    Ok(g.weighted_sum(a, weights))
}

fn cosine(a: &[f64], b: &[f64]) -> (f64, f64, f64, f64) {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (dot / (na * nb + COS_EPS), dot, na, nb)
}

/// Mean over voxels of `1 − cos(V̂, V)`; voxels where both are zero count as
/// perfect agreement. `target` receives no gradient.
pub fn cosine_loss(g: &mut Graph, pred: Var, target: &Tensor) -> Var {
    let p = g.value(pred);
    assert_eq!(p.shape(), target.shape(), "cosine loss shape mismatch");
    let (n, c) = (p.rows(), p.cols());
    let both_zero = |a: &[f64], b: &[f64]| a.iter().all(|&x| x == 0.0) && b.iter().all(|&x| x == 0.0);
    let mut total = 0.0;
    for r in 0..n {
        let (a, b) = (p.row(r), target.row(r));
        if !both_zero(a, b) {
            total += 1.0 - cosine(a, b).0;
        }
    }
    let target = target.clone();
    let t = g.constant(target.clone());
    g.custom(
        Tensor::scalar(total / n as f64),
        &[pred, t],
        Box::new(move |gout, parents, _| {
            let p = parents[0];
            let k = gout.item() / n as f64;
            let mut gp = vec![0.0; n * c];
            for r in 0..n {
                let (a, b) = (p.row(r), target.row(r));
                if both_zero(a, b) {
                    continue;
                }
                let (_, dot, na, nb) = cosine(a, b);
                let den = na * nb + COS_EPS;
                for j in 0..c {
                    let dna = if na > 0.0 { a[j] / na } else { 0.0 };
                    let dcos = b[j] / den - dot * nb * dna / (den * den);
                    gp[r * c + j] = -k * dcos;
                }
            }
            vec![Some(Tensor::from_vec(p.shape(), gp)), None]
        }),
    )
}

/// Mean-pooling taps for the three Gram perspectives over voxel rows.
#[derive(Clone, Debug)]
pub struct GramPooling {
    pub hw: Rc<SparseTaps>,
    pub hz: Rc<SparseTaps>,
    pub wz: Rc<SparseTaps>,
}

impl GramPooling {
    pub fn new(w: usize, h: usize, z: usize) -> Self {
        let row = |ix: usize, iy: usize, iz: usize| (ix * h + iy) * z + iz;
        let build = |outer: usize, inner: usize, pooled: usize, f: &dyn Fn(usize, usize, usize) -> usize| {
            let mut t = SparseTaps::new();
            for a in 0..outer {
                for b in 0..inner {
                    for k in 0..pooled {
                        t.push(f(a, b, k), 1.0 / pooled as f64);
                    }
                    t.finish_row();
                }
            }
            Rc::new(t)
        };
        Self {
            hw: build(w, h, z, &|x, y, k| row(x, y, k)),
            hz: build(w, z, h, &|x, zz, k| row(x, k, zz)),
            wz: build(h, z, w, &|y, zz, k| row(k, y, zz)),
        }
    }

    pub fn from_geometry(geo: &VolumeGeometry) -> Self {
        Self::new(geo.w, geo.w, geo.z)
    }

    pub fn perspectives(&self) -> [&Rc<SparseTaps>; 3] {
        [&self.hw, &self.hz, &self.wz]
    }
}

/// `[G^HW, G^HZ, G^WZ]` as graph values.
pub fn gram_matrices(g: &mut Graph, rows: Var, pooling: &GramPooling) -> [Var; 3] {
    pooling.perspectives().map(|taps| {
        let m = g.sparse_rows(rows, taps.clone());
        g.matmul_nt(m, m)
    })
}

/// Plain-value Gram set, used for targets and inspection.
pub fn gram_values(rows: &Tensor, pooling: &GramPooling) -> [Tensor; 3] {
    let mut g = Graph::new();
    let r = g.constant(rows.clone());
    gram_matrices(&mut g, r, pooling).map(|v| g.value(v).clone())
}

/// `(1/3) Σ_d ‖G^d_pred − G^d_target‖²_F`.
pub fn gram_loss(g: &mut Graph, pred: [Var; 3], target: &[Tensor; 3]) -> Var {
    let parts: Vec<Var> = pred
        .iter()
        .zip(target)
        .map(|(&p, t)| {
            let t = g.constant(t.clone());
            let d = g.sub(p, t);
            let sq = g.square(d);
            g.sum(sq)
        })
        .collect();
    let s = g.add_all(&parts);
    g.scale(s, 1.0 / 3.0)
}

/// Loss components for one step, each already a graph scalar.
#[derive(Clone, Debug, Default)]
pub struct LossParts {
    pub lang: Option<Var>,
    /// λ-weighted render losses, one per horizon.
    pub render: Vec<Var>,
    pub cos: Option<Var>,
    pub gram: Option<Var>,
}

pub const RENDER_COEFFICIENT: f64 = 10.0;

/// `L_lang + 10·Σ L_render + L_cos + L_gram`.
pub fn total_loss(g: &mut Graph, parts: &LossParts) -> Result<Var> {
    let mut terms = Vec::new();
    if let Some(l) = parts.lang {
        terms.push(l);
    }
    if !parts.render.is_empty() {
        let r = g.add_all(&parts.render);
        terms.push(g.scale(r, RENDER_COEFFICIENT));
    }
    terms.extend(parts.cos);
    terms.extend(parts.gram);
    for &t in &terms {
        if !g.value(t).all_finite() {
            return Err(Error::NonFinite("loss component".into()));
        }
    }
    if terms.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    Ok(g.add_all(&terms))
}
