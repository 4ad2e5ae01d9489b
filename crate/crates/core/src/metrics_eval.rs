//! Chamfer distance, ROUGE-L and the evaluation report.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::render::PointCloud;

/// Axis-aligned clipping box with closed intervals.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Roi {
    pub x: (f64, f64),
    pub y: (f64, f64),
    pub z: (f64, f64),
}

impl Roi {
    /// `x, y ∈ [−51.2, 51.2]`, `z ∈ [−3, 5]`.
    pub fn paper() -> Self {
        Self {
            x: (-51.2, 51.2),
            y: (-51.2, 51.2),
            z: (-3.0, 5.0),
        }
    }

    /// Paper height band with the planar bounds scaled to a world half-extent.
    pub fn scaled(extent: f64) -> Self {
        Self {
            x: (-extent, extent),
            y: (-extent, extent),
            z: (-3.0, 5.0),
        }
    }

    pub fn full() -> Self {
        let all = (f64::NEG_INFINITY, f64::INFINITY);
        Self { x: all, y: all, z: all }
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        let inside = |v: f64, (lo, hi): (f64, f64)| v >= lo && v <= hi;
        inside(p[0], self.x) && inside(p[1], self.y) && inside(p[2], self.z)
    }

    pub fn validate(&self) -> Result<()> {
        for (lo, hi) in [self.x, self.y, self.z] {
            if !(lo < hi) {
                return Err(Error::InvalidArgument(format!("empty ROI interval [{lo}, {hi}]")));
            }
        }
        Ok(())
    }
}

pub fn roi_filter(cloud: &PointCloud, roi: &Roi) -> PointCloud {
    PointCloud {
        points: cloud.points.iter().copied().filter(|p| roi.contains(*p)).collect(),
    }
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
}

/// Uniform grid over the cloud's bounding box, buckets stored CSR-style,
/// for exact nearest-neighbour queries.
struct SpatialHash<'a> {
    points: &'a [[f64; 3]],
    cell: f64,
    lo: [i64; 3],
    hi: [i64; 3],
    /// Bucket `c` holds `order[start[c]..start[c + 1]]`.
    start: Vec<usize>,
    order: Vec<usize>,
}

impl<'a> SpatialHash<'a> {
    fn new(points: &'a [[f64; 3]]) -> Self {
        let mut mn = [f64::INFINITY; 3];
        let mut mx = [f64::NEG_INFINITY; 3];
        for p in points {
            for a in 0..3 {
                mn[a] = mn[a].min(p[a]);
                mx[a] = mx[a].max(p[a]);
            }
        }
        // Size cells from the non-flat axes so planar clouds stay coarse.
        let spans: Vec<f64> = (0..3).map(|a| mx[a] - mn[a]).filter(|&s| s > 1e-9).collect();
        let cell = if spans.is_empty() {
            1.0
        } else {
            let vol: f64 = spans.iter().product();
            (vol / points.len() as f64).powf(1.0 / spans.len() as f64).max(1e-6)
        };
        let key = |p: [f64; 3]| p.map(|v| (v / cell).floor() as i64);
        let lo = key(mn);
        let hi = key(mx);
        let mut s = Self { points, cell, lo, hi, start: Vec::new(), order: Vec::new() };
        let ids: Vec<usize> = points.iter().map(|p| s.index(key(*p))).collect();
        let cells = (0..3).map(|a| (hi[a] - lo[a] + 1) as usize).product::<usize>();
        let mut start = vec![0usize; cells + 1];
        for &c in &ids {
            start[c + 1] += 1;
        }
        for c in 0..cells {
            start[c + 1] += start[c];
        }
        let mut fill = start.clone();
        let mut order = vec![0usize; points.len()];
        for (i, &c) in ids.iter().enumerate() {
            order[fill[c]] = i;
            fill[c] += 1;
        }
        s.start = start;
        s.order = order;
        s
    }

    fn key(&self, p: [f64; 3]) -> [i64; 3] {
        p.map(|v| (v / self.cell).floor() as i64)
    }

    fn index(&self, k: [i64; 3]) -> usize {
        let (ny, nz) = (self.hi[1] - self.lo[1] + 1, self.hi[2] - self.lo[2] + 1);
        (((k[0] - self.lo[0]) * ny + (k[1] - self.lo[1])) * nz + (k[2] - self.lo[2])) as usize
    }

    fn scan(&self, k: [i64; 3], best: &mut f64, q: [f64; 3]) {
        if (0..3).any(|a| k[a] < self.lo[a] || k[a] > self.hi[a]) {
            return;
        }
        let c = self.index(k);
        for &i in &self.order[self.start[c]..self.start[c + 1]] {
            *best = best.min(dist(q, self.points[i]));
        }
    }

    /// Visits cells on the surface of the cube of radius `r` around `k`.
    fn ring(&self, k: [i64; 3], r: i64, best: &mut f64, q: [f64; 3]) {
        for dx in -r..=r {
            for dy in -r..=r {
                let on_face = dx.abs() == r || dy.abs() == r;
                let step = if on_face { 1 } else { (2 * r) as usize };
                for dz in (-r..=r).step_by(step.max(1)) {
                    self.scan([k[0] + dx, k[1] + dy, k[2] + dz], best, q);
                }
            }
        }
    }

    fn nearest(&self, q: [f64; 3]) -> f64 {
        let k = self.key(q);
        // Once past this radius every occupied cell has been visited.
        let reach = (0..3)
            .map(|a| (k[a] - self.lo[a]).abs().max((self.hi[a] - k[a]).abs()))
            .max()
            .unwrap_or(0);
        let mut best = f64::INFINITY;
        for r in 0..=reach {
            // A shell with more cells than points is cheaper to replace by a scan.
            let shell = (6 * (2 * r + 1) * (2 * r + 1)) as usize;
            if shell > self.points.len() {
                return self.points.iter().map(|p| dist(q, *p)).fold(best, f64::min);
            }
            self.ring(k, r, &mut best, q);
            // Points in rings beyond r are at least r·cell away.
            if best <= r as f64 * self.cell {
                break;
            }
        }
        best
    }
}

fn directed_mean(from: &[[f64; 3]], to: &SpatialHash) -> f64 {
    from.iter().map(|p| to.nearest(*p)).sum::<f64>() / from.len() as f64
}

/// Sum of the two directed mean nearest-neighbour distances.
pub fn chamfer(p: &PointCloud, q: &PointCloud) -> Result<f64> {
    if p.is_empty() || q.is_empty() {
        return Err(Error::Empty(format!(
            "chamfer distance needs two non-empty clouds (got {} and {} points)",
            p.len(),
            q.len()
        )));
    }
    let hp = SpatialHash::new(&p.points);
    let hq = SpatialHash::new(&q.points);
    Ok(directed_mean(&p.points, &hq) + directed_mean(&q.points, &hp))
}

fn lcs(a: &[&str], b: &[&str]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based F1 over whitespace tokens.
pub fn rouge_l(candidate: &str, reference: &str) -> f64 {
    let c: Vec<&str> = candidate.split_whitespace().collect();
    let r: Vec<&str> = reference.split_whitespace().collect();
    if r.is_empty() {
        log::warn!("ROUGE-L against an empty reference scores 0");
        return 0.0;
    }
    if c.is_empty() {
        return 0.0;
    }
    let l = lcs(&c, &r) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let (p, rc) = (l / c.len() as f64, l / r.len() as f64);
    2.0 * p * rc / (p + rc)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// Mean Chamfer distance per horizon, index 0 is the current frame.
    pub chamfer: Vec<f64>,
    pub rouge_l: f64,
    pub answer_accuracy: f64,
    pub roi: Roi,
    pub config_digest: String,
    pub frames: usize,
    pub questions: usize,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        for (i, c) in self.chamfer.iter().enumerate() {
            let _ = writeln!(s, "chamfer_{i}s,{c:.6}");
        }
        let _ = writeln!(s, "rouge_l,{:.6}", self.rouge_l);
        let _ = writeln!(s, "answer_accuracy,{:.6}", self.answer_accuracy);
        let _ = writeln!(s, "roi,\"{}\"", roi_label(&self.roi));
        let _ = writeln!(s, "config_digest,{}", self.config_digest);
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "ROI        {}", roi_label(&self.roi));
        let _ = writeln!(s, "frames     {}", self.frames);
        for (i, c) in self.chamfer.iter().enumerate() {
            let _ = writeln!(s, "CD @ {i}s    {c:.4} m");
        }
        let _ = writeln!(s, "ROUGE-L    {:.4}", self.rouge_l);
        let _ = writeln!(s, "accuracy   {:.4} ({} questions)", self.answer_accuracy, self.questions);
        let _ = writeln!(s, "config     {}", self.config_digest);
        s
    }
}

pub fn roi_label(roi: &Roi) -> String {
    if roi.x.0.is_infinite() {
        return "full".into();
    }
    format!(
        "x[{},{}] y[{},{}] z[{},{}]",
        roi.x.0, roi.x.1, roi.y.0, roi.y.1, roi.z.0, roi.z.1
    )
}
