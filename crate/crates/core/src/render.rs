//! BEV-to-point rendering: grid → feature volume → SDF along rays → depth.
//!
//! Volumes are held channel-first as `[c', z, w, h]` for the 3-D convolutions
//! and flattened to `[w·h·z, c']` rows (voxel `((ix·h + iy)·z + iz)`) for
//! trilinear lookup. Everything is expressed in the ego frame with the LiDAR
//! sensor at the origin.

use std::rc::Rc;

use rand::Rng;

use crate::autograd::{sigmoid, Graph, ParamId, ParamStore, SparseTaps, Var};
use crate::config::{ModelConfig, SdfPrior};
use crate::error::{Error, Result};
use crate::nn::{Activation, Conv, Init, Mlp};
use crate::tensor::Tensor;

/// `α_i = max((σ(τ s_i) − σ(τ s_{i+1})) / σ(τ s_i), 0)`, evaluated as
/// `1 − exp(log σ(τ s_{i+1}) − log σ(τ s_i))` to stay finite for large `τ|s|`.
pub fn opacity(s_i: f64, s_next: f64, tau: f64) -> f64 {
    let r = log_sigmoid(tau * s_next) - log_sigmoid(tau * s_i);
    if r < 0.0 {
        -r.exp_m1()
    } else {
        0.0
    }
}

fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Front-to-back compositing. Returns `(Σ w_i d_i, w)`.
pub fn composite(alpha: &[f64], depths: &[f64]) -> (f64, Vec<f64>) {
    let mut t = 1.0;
    let mut d = 0.0;
    let w: Vec<f64> = alpha
        .iter()
        .zip(depths)
        .map(|(&a, &di)| {
            let wi = t * a;
            t *= 1.0 - a;
            d += wi * di;
            wi
        })
        .collect();
    (d, w)
}

/// Opacities of one ray; the last sample has no successor and stays transparent.
pub fn ray_opacities(s: &[f64], tau: f64) -> Vec<f64> {
    let n = s.len();
    (0..n)
        .map(|i| if i + 1 < n { opacity(s[i], s[i + 1], tau) } else { 0.0 })
        .collect()
}

/// Expected depth of one ray from its SDF samples.
pub fn depth_from_sdf(s: &[f64], depths: &[f64], tau: f64) -> (f64, Vec<f64>) {
    composite(&ray_opacities(s, tau), depths)
}

/// Gradient of [`depth_from_sdf`] w.r.t. the SDF samples and `τ`.
///
/// Uses `∂d̃/∂α_k = T_k (d_k − A_k)` with the suffix depth
/// `A_k = α_{k+1} d_{k+1} + (1 − α_{k+1}) A_{k+1}`, which avoids dividing by
/// `1 − α_k`.
pub fn depth_from_sdf_grad(s: &[f64], depths: &[f64], tau: f64) -> (Vec<f64>, f64) {
    let n = s.len();
    let alpha = ray_opacities(s, tau);
    let mut trans = vec![1.0; n];
    for i in 1..n {
        trans[i] = trans[i - 1] * (1.0 - alpha[i - 1]);
    }
    let mut suffix = vec![0.0; n];
    for k in (0..n.saturating_sub(1)).rev() {
        suffix[k] = alpha[k + 1] * depths[k + 1] + (1.0 - alpha[k + 1]) * suffix[k + 1];
    }
    let mut ds = vec![0.0; n];
    let mut dtau = 0.0;
    for k in 0..n.saturating_sub(1) {
        if alpha[k] <= 0.0 {
            continue;
        }
        let da = trans[k] * (depths[k] - suffix[k]);
        let keep = 1.0 - alpha[k];
        let (a, b) = (tau * s[k], tau * s[k + 1]);
        let (ga, gb) = (1.0 - sigmoid(a), 1.0 - sigmoid(b));
        ds[k] += da * keep * tau * ga;
        ds[k + 1] -= da * keep * tau * gb;
        dtau += da * keep * (s[k] * ga - s[k + 1] * gb);
    }
    (ds, dtau)
}

/// Stratified sample depths, rays sharing one sampling plan.
#[derive(Clone, Debug)]
pub struct SamplePlan {
    pub rays: usize,
    pub n: usize,
    /// Trilinear taps into the volume rows, `rays·n` rows.
    pub taps: Rc<SparseTaps>,
    /// Normalized positions fed to the SDF head, `[rays·n, 3]`.
    pub positions: Tensor,
    /// Sensor-frame height of each sample, metres.
    pub heights: Rc<Vec<f64>>,
    /// Sample depths, ray-major.
    pub depths: Rc<Vec<f64>>,
}

/// Voxel-grid geometry shared by the sampler and the voxelizer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VolumeGeometry {
    pub w: usize,
    pub z: usize,
    pub extent: f64,
    pub z_min: f64,
    pub z_max: f64,
}

impl VolumeGeometry {
    pub fn from_config(cfg: &ModelConfig) -> Self {
        Self {
            w: cfg.bev_w,
            z: cfg.vol_z,
            extent: cfg.extent,
            z_min: cfg.z_range.0,
            z_max: cfg.z_range.1,
        }
    }

    pub fn cell(&self) -> f64 {
        2.0 * self.extent / self.w as f64
    }

    pub fn dz(&self) -> f64 {
        (self.z_max - self.z_min) / self.z as f64
    }

    pub fn voxels(&self) -> usize {
        self.w * self.w * self.z
    }

    pub fn row(&self, ix: usize, iy: usize, iz: usize) -> usize {
        (ix * self.w + iy) * self.z + iz
    }

    /// Continuous voxel coordinates; integer values are voxel centres.
    pub fn continuous(&self, p: [f64; 3]) -> [f64; 3] {
        [
            (p[0] + self.extent) / self.cell() - 0.5,
            (p[1] + self.extent) / self.cell() - 0.5,
            (p[2] - self.z_min) / self.dz() - 0.5,
        ]
    }

    pub fn center(&self, ix: usize, iy: usize, iz: usize) -> [f64; 3] {
        [
            -self.extent + (ix as f64 + 0.5) * self.cell(),
            -self.extent + (iy as f64 + 0.5) * self.cell(),
            self.z_min + (iz as f64 + 0.5) * self.dz(),
        ]
    }

    /// Voxel containing `p`, if inside the volume.
    pub fn voxel_of(&self, p: [f64; 3]) -> Option<(usize, usize, usize)> {
        let c = self.continuous(p);
        let idx = |x: f64, n: usize| {
            let i = (x + 0.5).floor();
            (i >= 0.0 && i < n as f64).then_some(i as usize)
        };
        Some((idx(c[0], self.w)?, idx(c[1], self.w)?, idx(c[2], self.z)?))
    }

    /// Zero-padded trilinear taps for one point.
    pub fn push_trilinear(&self, taps: &mut SparseTaps, p: [f64; 3]) {
        let c = self.continuous(p);
        let base = c.map(f64::floor);
        let frac = [c[0] - base[0], c[1] - base[1], c[2] - base[2]];
        let dims = [self.w, self.w, self.z];
        for corner in 0..8 {
            let mut idx = [0usize; 3];
            let mut wgt = 1.0;
            let mut inside = true;
            for a in 0..3 {
                let up = (corner >> a) & 1 == 1;
                let i = base[a] + up as u8 as f64;
                wgt *= if up { frac[a] } else { 1.0 - frac[a] };
                if i < 0.0 || i >= dims[a] as f64 {
                    inside = false;
                } else {
                    idx[a] = i as usize;
                }
            }
            if inside && wgt != 0.0 {
                taps.push(self.row(idx[0], idx[1], idx[2]), wgt);
            }
        }
        taps.finish_row();
    }

    pub fn normalized(&self, p: [f64; 3]) -> [f64; 3] {
        let zm = 0.5 * (self.z_min + self.z_max);
        let zh = 0.5 * (self.z_max - self.z_min);
        [p[0] / self.extent, p[1] / self.extent, (p[2] - zm) / zh]
    }
}

/// Builds sample positions along rays from the origin. With `jitter`, each
/// bin gets one uniform draw; without it samples sit at bin centres.
pub fn plan_samples<R: Rng + ?Sized>(
    geo: &VolumeGeometry,
    directions: &[[f64; 3]],
    n: usize,
    depth_range: (f64, f64),
    jitter: Option<&mut R>,
) -> Result<SamplePlan> {
    let (lo, hi) = depth_range;
    if !(lo < hi) || n < 2 {
        return Err(Error::InvalidArgument(format!(
            "degenerate sampling: {n} samples over [{lo}, {hi}]"
        )));
    }
    let bin = (hi - lo) / n as f64;
    let mut jitter = jitter;
    let mut taps = SparseTaps::new();
    let mut pos = Vec::with_capacity(directions.len() * n * 3);
    let mut depths = Vec::with_capacity(directions.len() * n);
    let mut heights = Vec::with_capacity(directions.len() * n);
    for dir in directions {
        for i in 0..n {
            let u = match jitter.as_deref_mut() {
                Some(r) => r.gen::<f64>(),
                None => 0.5,
            };
            let d = lo + (i as f64 + u) * bin;
            let p = [d * dir[0], d * dir[1], d * dir[2]];
            geo.push_trilinear(&mut taps, p);
            pos.extend(geo.normalized(p));
            depths.push(d);
            heights.push(p[2]);
        }
    }
    Ok(SamplePlan {
        rays: directions.len(),
        n,
        taps: Rc::new(taps),
        positions: Tensor::from_vec(&[directions.len() * n, 3], pos),
        depths: Rc::new(depths),
        heights: Rc::new(heights),
    })
}

/// One ray's samples as plain values.
#[derive(Clone, Debug, PartialEq)]
pub struct RaySampleSet {
    pub depths: Vec<f64>,
    pub features: Vec<Vec<f64>>,
    pub sdf: Vec<f64>,
    pub tau: f64,
}

/// Composites `sdf: [rays·n, 1]` into `[rays, 1]` depths. `log_tau` is the
/// `[1]` parameter with `τ = exp(log_tau)`.
pub fn composite_depths(g: &mut Graph, sdf: Var, log_tau: Var, depths: Rc<Vec<f64>>, n: usize) -> Var {
    let s = g.value(sdf).data().to_vec();
    let tau = g.value(log_tau).data()[0].exp();
    let rays = s.len() / n;
    let out: Vec<f64> = (0..rays)
        .map(|r| depth_from_sdf(&s[r * n..(r + 1) * n], &depths[r * n..(r + 1) * n], tau).0)
        .collect();
    g.custom(
        Tensor::from_vec(&[rays, 1], out),
        &[sdf, log_tau],
        Box::new(move |gout, p, _| {
            let s = p[0].data();
            let tau = p[1].data()[0].exp();
            let mut ds = vec![0.0; s.len()];
            let mut dlog = 0.0;
            for r in 0..rays {
                let go = gout.data()[r];
                if go == 0.0 {
                    continue;
                }
                let (gs, gt) = depth_from_sdf_grad(&s[r * n..(r + 1) * n], &depths[r * n..(r + 1) * n], tau);
                for (d, x) in ds[r * n..(r + 1) * n].iter_mut().zip(gs) {
                    *d = go * x;
                }
                dlog += go * gt * tau;
            }
            vec![
                Some(Tensor::from_vec(p[0].shape(), ds)),
                Some(Tensor::from_vec(&[1], vec![dlog])),
            ]
        }),
    )
}

/// Per-ray weight sums for the current SDF values (no gradient).
pub fn weight_sums(sdf: &[f64], depths: &[f64], n: usize, tau: f64) -> Vec<f64> {
    (0..sdf.len() / n)
        .map(|r| {
            depth_from_sdf(&sdf[r * n..(r + 1) * n], &depths[r * n..(r + 1) * n], tau)
                .1
                .iter()
                .sum()
        })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// ASCII PLY with `x y z` float vertices.
    pub fn write_ply<W: std::io::Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "ply\nformat ascii 1.0\nelement vertex {}", self.points.len())?;
        writeln!(out, "property double x\nproperty double y\nproperty double z\nend_header")?;
        for p in &self.points {
            writeln!(out, "{} {} {}", p[0], p[1], p[2])?;
        }
        Ok(())
    }
}

/// `origin + d̃ · direction` for every ray whose weight sum reaches `threshold`.
pub fn render_pointcloud(
    origin: [f64; 3],
    directions: &[[f64; 3]],
    depths: &[f64],
    weight_sums: &[f64],
    threshold: f64,
) -> PointCloud {
    let points = directions
        .iter()
        .zip(depths)
        .zip(weight_sums)
        .filter(|&(_, &ws)| ws > 0.0 && ws >= threshold)
        .map(|((t, &d), _)| [origin[0] + d * t[0], origin[1] + d * t[1], origin[2] + d * t[2]])
        .collect();
    PointCloud { points }
}

/// Upsampler, volume expansion and SDF head.
#[derive(Clone, Debug)]
pub struct Renderer {
    pub upsample: Conv,
    pub vol1: Conv,
    pub vol2: Conv,
    pub sdf: Mlp,
    pub log_tau: ParamId,
    pub geo: VolumeGeometry,
    pub c_vol: usize,
    pub prior: SdfPrior,
    /// Radius of the spherical prior.
    pub prior_radius: f64,
    /// Ground height in the sensor frame, for the ground prior.
    pub ground_z: f64,
}

impl Renderer {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Self {
        let (zc, c) = (cfg.vol_z * cfg.vol_c, cfg.vol_c);
        let h = cfg.sdf_hidden;
        Self {
            upsample: Conv::new(store, "render.up", 2, 4 * cfg.bev_c, zc, 3, 1, 1, Init::Default, rng),
            vol1: Conv::new(store, "render.vol1", 3, c, c, 3, 1, 1, Init::Default, rng),
            vol2: Conv::new(store, "render.vol2", 3, c, c, 3, 1, 1, Init::Default, rng),
            sdf: Mlp::new(store, "render.sdf", &[3 + c, h, h, 1], Activation::Silu, Init::Default, rng),
            log_tau: store.add("render.log_tau", Tensor::from_vec(&[1], vec![cfg.tau_init.ln()])),
            geo: VolumeGeometry::from_config(cfg),
            c_vol: c,
            prior: cfg.sdf_prior,
            prior_radius: 0.5 * (cfg.depth_min + cfg.depth_max),
            ground_z: -cfg.lidar.sensor_height,
        }
    }

    /// Nearest ×4 then a 3×3 convolution: `[4c, w/4, h/4]` → `[z·c', w, h]`.
    pub fn upsample(&self, g: &mut Graph, store: &ParamStore, comp: Var) -> Var {
        let up = g.upsample_nearest2d(comp, 4);
        self.upsample.forward(g, store, up)
    }

    /// Splits channels into height levels and refines with 3-D convolutions.
    pub fn expand(&self, g: &mut Graph, store: &ParamStore, grid: Var) -> Result<Var> {
        let s = g.shape(grid).to_vec();
        let (z, c) = (self.geo.z, self.c_vol);
        if s[0] != z * c {
            return Err(Error::Shape(format!("{} channels cannot split into {z} levels of {c}", s[0])));
        }
        let v = g.reshape(grid, &[z, c, s[1], s[2]]);
        let v = g.permute(v, &[1, 0, 2, 3]);
        let v = self.vol1.forward(g, store, v);
        let v = g.silu(v);
        Ok(self.vol2.forward(g, store, v))
    }

    /// `[c', z, w, h]` → `[w·h·z, c']`.
    pub fn volume_rows(&self, g: &mut Graph, vol: Var) -> Var {
        let v = g.permute(vol, &[2, 3, 1, 0]);
        g.reshape(v, &[self.geo.voxels(), self.c_vol])
    }

    /// SDF values `[rays·n, 1]` at the planned samples.
    pub fn sdf_values(&self, g: &mut Graph, store: &ParamStore, rows: Var, plan: &SamplePlan) -> Var {
        let feats = g.sparse_rows(rows, plan.taps.clone());
        let pos = g.constant(plan.positions.clone());
        let input = g.concat_cols(&[pos, feats]);
        let s = self.sdf.forward(g, store, input);
        let prior: Vec<f64> = match self.prior {
            SdfPrior::Sphere => plan.depths.iter().map(|d| self.prior_radius - d).collect(),
            SdfPrior::Ground => plan.heights.iter().map(|z| z - self.ground_z).collect(),
            SdfPrior::None => return s,
        };
        let prior = g.constant(Tensor::from_vec(&[prior.len(), 1], prior));
        g.add(s, prior)
    }

    /// Expected depths `[rays, 1]` and the SDF samples they came from.
    pub fn render(&self, g: &mut Graph, store: &ParamStore, rows: Var, plan: &SamplePlan) -> (Var, Var) {
        let s = self.sdf_values(g, store, rows, plan);
        let lt = g.param(store, self.log_tau);
        (composite_depths(g, s, lt, plan.depths.clone(), plan.n), s)
    }

    pub fn tau(&self, store: &ParamStore) -> f64 {
        store.get(self.log_tau).data()[0].exp()
    }
}

/// Samples one ray against a `[w·h·z, c']` row volume.
pub fn sample_sdf(
    renderer: &Renderer,
    store: &ParamStore,
    volume_rows: &Tensor,
    direction: [f64; 3],
    n: usize,
    depth_range: (f64, f64),
) -> Result<RaySampleSet> {
    let plan = plan_samples::<rand_chacha::ChaCha8Rng>(&renderer.geo, &[direction], n, depth_range, None)?;
    let mut g = Graph::new();
    let rows = g.constant(volume_rows.clone());
    let feats = g.sparse_rows(rows, plan.taps.clone());
    let s = renderer.sdf_values(&mut g, store, rows, &plan);
    let f = g.value(feats);
    Ok(RaySampleSet {
        depths: plan.depths.to_vec(),
        features: (0..n).map(|i| f.row(i).to_vec()).collect(),
        sdf: g.value(s).data().to_vec(),
        tau: renderer.tau(store),
    })
}
