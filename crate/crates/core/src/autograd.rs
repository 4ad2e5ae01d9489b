//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation of one forward pass. Nodes are
//! addressed by the copyable handle [`Var`]; parameters enter the tape from a
//! [`ParamStore`] and their gradients are collected by [`Gradients::param_grads`].
//! All arithmetic is `f64` so finite-difference checks are meaningful.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::tensor::{gemm, Tensor};

pub type ParamId = usize;

/// Named parameter tensors, addressed by insertion index.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, ParamId>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Panics on duplicate names; parameter layout is fixed at model construction.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.entries.len();
        self.by_name.insert(name.clone(), id);
        self.entries.push(ParamEntry { name, value });
        id
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn expect(&self, name: &str) -> ParamId {
        self.id(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id].name
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate()
    }

    pub fn ids_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.entries
            .iter()
            .enumerate()
            .filter(move |(_, e)| e.name.starts_with(prefix))
            .map(|(i, _)| i)
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward closure: `(grad_out, parent_values, out_value) -> per-parent grads`.
pub type BackwardFn = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    parents: Vec<Var>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

/// Row-sparse linear map: output row `r` is `Σ weight[t] · src[index[t]]` for
/// `t` in `offsets[r]..offsets[r + 1]`.
#[derive(Clone, Debug, Default)]
pub struct SparseTaps {
    pub offsets: Vec<usize>,
    pub index: Vec<usize>,
    pub weight: Vec<f64>,
}

impl SparseTaps {
    pub fn new() -> Self {
        Self {
            offsets: vec![0],
            index: Vec::new(),
            weight: Vec::new(),
        }
    }

    pub fn push(&mut self, index: usize, weight: f64) {
        self.index.push(index);
        self.weight.push(weight);
    }

    pub fn finish_row(&mut self) {
        self.offsets.push(self.index.len());
    }

    pub fn rows(&self) -> usize {
        self.offsets.len() - 1
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(Var, ParamId)>,
    param_vars: HashMap<ParamId, Var>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input that gradients are tracked for.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Places a parameter on the tape; repeated requests share one node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.leaf(store.get(id).clone());
        self.params.push((v, id));
        self.param_vars.insert(id, v);
        v
    }

    pub fn param_named(&mut self, store: &ParamStore, name: &str) -> Var {
        self.param(store, store.expect(name))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a node whose backward is supplied by the caller. Used by fused
    /// module-specific operations.
    pub fn custom(&mut self, value: Tensor, parents: &[Var], backward: BackwardFn) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            parents: parents.to_vec(),
            backward: requires_grad.then_some(backward),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).numel(), 1, "backward from non-scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(back) = &node.backward else { continue };
            let Some(g) = grads[i].take() else { continue };
            let parent_vals: Vec<&Tensor> =
                node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
            let pg = back(&g, &parent_vals, &node.value);
            debug_assert_eq!(pg.len(), node.parents.len());
            for (p, gp) in node.parents.iter().zip(pg) {
                let Some(gp) = gp else { continue };
                if !self.nodes[p.0].requires_grad {
                    continue;
                }
                match &mut grads[p.0] {
                    Some(acc) => acc.add_assign(&gp),
                    slot @ None => *slot = Some(gp.reshape(self.nodes[p.0].value.shape())),
                }
            }
            grads[i] = Some(g);
        }
        Gradients {
            grads,
            params: self.params.clone(),
            shapes: self.params.iter().map(|(v, _)| self.value(*v).shape().to_vec()).collect(),
        }
    }

    fn unary(
        &mut self,
        a: Var,
        value: Tensor,
        backward: impl Fn(&Tensor, &Tensor, &Tensor) -> Tensor + 'static,
    ) -> Var {
        self.custom(
            value,
            &[a],
            Box::new(move |g, p, out| vec![Some(backward(g, p[0], out))]),
        )
    }

    // ---- elementwise -------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.custom(v, &[a, b], Box::new(|g, _, _| vec![Some(g.clone()), Some(g.clone())]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.custom(
            v,
            &[a, b],
            Box::new(|g, _, _| vec![Some(g.clone()), Some(g.map(|x| -x))]),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.custom(
            v,
            &[a, b],
            Box::new(|g, p, _| {
                vec![
                    Some(g.zip_map(p[1], |g, y| g * y)),
                    Some(g.zip_map(p[0], |g, x| g * x)),
                ]
            }),
        )
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).map(|x| x * k);
        self.unary(a, v, move |g, _, _| g.map(|x| x * k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).map(|x| x + k);
        self.unary(a, v, |g, _, _| g.clone())
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.unary(a, v, |g, x, _| g.zip_map(x, |g, x| 2.0 * g * x))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::abs);
        self.unary(a, v, |g, x, _| g.zip_map(x, |g, x| g * x.signum() * (x != 0.0) as u8 as f64))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.unary(a, v, |g, x, _| g.zip_map(x, |g, x| if x > 0.0 { g } else { 0.0 }))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * sigmoid(x));
        self.unary(a, v, |g, x, _| {
            g.zip_map(x, |g, x| {
                let s = sigmoid(x);
                g * (s + x * s * (1.0 - s))
            })
        })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.unary(a, v, |g, _, y| g.zip_map(y, |g, y| g * (1.0 - y * y)))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.unary(a, v, |g, _, y| g.zip_map(y, |g, y| g * y))
    }

    /// Blocks gradient flow; the value passes through unchanged.
    pub fn detach(&mut self, a: Var) -> Var {
        let v = self.value(a).clone();
        self.constant(v)
    }

    // ---- broadcasting ------------------------------------------------

    /// `a[.., c] + b[c]` over the trailing axis.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let c = self.value(b).numel();
        let av = self.value(a);
        assert_eq!(av.shape().last().copied(), Some(c), "add_row width mismatch");
        let bv = self.value(b).data().to_vec();
        let mut v = av.clone();
        for (i, x) in v.data_mut().iter_mut().enumerate() {
            *x += bv[i % c];
        }
        self.custom(
            v,
            &[a, b],
            Box::new(move |g, _, _| {
                let mut gb = vec![0.0; c];
                for (i, x) in g.data().iter().enumerate() {
                    gb[i % c] += x;
                }
                vec![Some(g.clone()), Some(Tensor::from_vec(&[c], gb))]
            }),
        )
    }

    /// `a[.., c] * b[c]` over the trailing axis.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Var {
        let c = self.value(b).numel();
        let av = self.value(a);
        assert_eq!(av.shape().last().copied(), Some(c), "mul_row width mismatch");
        let bv = self.value(b).data().to_vec();
        let mut v = av.clone();
        for (i, x) in v.data_mut().iter_mut().enumerate() {
            *x *= bv[i % c];
        }
        self.custom(
            v,
            &[a, b],
            Box::new(move |g, p, _| {
                let (a, b) = (p[0].data(), p[1].data());
                let mut ga = g.clone();
                let mut gb = vec![0.0; c];
                for (i, x) in ga.data_mut().iter_mut().enumerate() {
                    gb[i % c] += *x * a[i];
                    *x *= b[i % c];
                }
                vec![Some(ga), Some(Tensor::from_vec(&[c], gb))]
            }),
        )
    }

    /// `a[r, ..] * m[r]`: scales every row of a 2-D tensor.
    pub fn mul_col(&mut self, a: Var, m: Var) -> Var {
        let (rows, cols) = (self.value(a).rows(), self.value(a).cols());
        assert_eq!(self.value(m).numel(), rows, "mul_col height mismatch");
        let mv = self.value(m).data().to_vec();
        let mut v = self.value(a).clone();
        for r in 0..rows {
            for x in &mut v.data_mut()[r * cols..(r + 1) * cols] {
                *x *= mv[r];
            }
        }
        self.custom(
            v,
            &[a, m],
            Box::new(move |g, p, _| {
                let (a, m) = (p[0].data(), p[1].data());
                let mut ga = g.clone();
                let mut gm = vec![0.0; rows];
                for r in 0..rows {
                    for j in 0..cols {
                        let i = r * cols + j;
                        gm[r] += g.data()[i] * a[i];
                        ga.data_mut()[i] *= m[r];
                    }
                }
                vec![Some(ga), Some(Tensor::from_vec(&[rows], gm))]
            }),
        )
    }

    // ---- linear algebra ----------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.custom(
            v,
            &[a, b],
            Box::new(|g, p, _| {
                let (a, b) = (p[0], p[1]);
                let (m, k, n) = (a.rows(), a.cols(), b.cols());
                let mut ga = vec![0.0; m * k];
                gemm(m, n, k, g.data(), false, b.data(), true, &mut ga, 0.0);
                let mut gb = vec![0.0; k * n];
                gemm(k, m, n, a.data(), true, g.data(), false, &mut gb, 0.0);
                vec![
                    Some(Tensor::from_vec(&[m, k], ga)),
                    Some(Tensor::from_vec(&[k, n], gb)),
                ]
            }),
        )
    }

    /// `a · bᵀ` for `a: [m, k]`, `b: [n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k, n) = (av.rows(), av.cols(), bv.rows());
        assert_eq!(bv.cols(), k, "matmul_nt inner dims");
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), false, bv.data(), true, &mut out, 0.0);
        self.custom(
            Tensor::from_vec(&[m, n], out),
            &[a, b],
            Box::new(move |g, p, _| {
                let (a, b) = (p[0], p[1]);
                let mut ga = vec![0.0; m * k];
                gemm(m, n, k, g.data(), false, b.data(), false, &mut ga, 0.0);
                let mut gb = vec![0.0; n * k];
                gemm(n, m, k, g.data(), true, a.data(), false, &mut gb, 0.0);
                vec![
                    Some(Tensor::from_vec(&[m, k], ga)),
                    Some(Tensor::from_vec(&[n, k], gb)),
                ]
            }),
        )
    }

    /// `x · w + b` with `w: [in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let y = self.matmul(x, w);
        match b {
            Some(b) => self.add_row(y, b),
            None => y,
        }
    }

    // ---- shape -------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self.value(a).clone().reshape(shape);
        self.unary(a, v, |g, x, _| g.clone().reshape(x.shape()))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Var {
        let v = self.value(a).permute(axes);
        let mut inverse = vec![0; axes.len()];
        for (k, &ax) in axes.iter().enumerate() {
            inverse[ax] = k;
        }
        self.unary(a, v, move |g, _, _| g.permute(&inverse))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        self.permute(a, &[1, 0])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut sizes = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols(), cols, "concat_rows width mismatch");
            sizes.push(t.rows());
            data.extend_from_slice(t.data());
        }
        let rows: usize = sizes.iter().sum();
        self.custom(
            Tensor::from_vec(&[rows, cols], data),
            parts,
            Box::new(move |g, _, _| {
                let mut start = 0;
                sizes
                    .iter()
                    .map(|&r| {
                        let t = Tensor::from_vec(
                            &[r, cols],
                            g.data()[start * cols..(start + r) * cols].to_vec(),
                        );
                        start += r;
                        Some(t)
                    })
                    .collect()
            }),
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let t = self.value(p);
            assert_eq!(t.rows(), rows, "concat_cols height mismatch");
            for r in 0..rows {
                data[r * total + off..r * total + off + w].copy_from_slice(t.row(r));
            }
            off += w;
        }
        self.custom(
            Tensor::from_vec(&[rows, total], data),
            parts,
            Box::new(move |g, _, _| {
                let mut off = 0;
                widths
                    .iter()
                    .map(|&w| {
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&g.data()[r * total + off..r * total + off + w]);
                        }
                        off += w;
                        Some(Tensor::from_vec(&[rows, w], d))
                    })
                    .collect()
            }),
        )
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let t = self.value(a);
        let (rows, cols) = (t.rows(), t.cols());
        assert!(start <= end && end <= rows, "slice_rows {start}..{end} of {rows}");
        let v = Tensor::from_vec(&[end - start, cols], t.data()[start * cols..end * cols].to_vec());
        self.unary(a, v, move |g, _, _| {
            let mut d = vec![0.0; rows * cols];
            d[start * cols..end * cols].copy_from_slice(g.data());
            Tensor::from_vec(&[rows, cols], d)
        })
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let t = self.value(a);
        let (rows, cols) = (t.rows(), t.cols());
        assert!(start <= end && end <= cols, "slice_cols {start}..{end} of {cols}");
        let w = end - start;
        let mut d = Vec::with_capacity(rows * w);
        for r in 0..rows {
            d.extend_from_slice(&t.row(r)[start..end]);
        }
        self.unary(a, Tensor::from_vec(&[rows, w], d), move |g, _, _| {
            let mut out = vec![0.0; rows * cols];
            for r in 0..rows {
                out[r * cols + start..r * cols + end]
                    .copy_from_slice(&g.data()[r * w..(r + 1) * w]);
            }
            Tensor::from_vec(&[rows, cols], out)
        })
    }

    /// Embedding lookup.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let (n, c) = (t.rows(), t.cols());
        let mut d = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            assert!(i < n, "gather index {i} out of {n}");
            d.extend_from_slice(t.row(i));
        }
        let ids = ids.to_vec();
        self.unary(table, Tensor::from_vec(&[ids.len(), c], d), move |g, _, _| {
            let mut out = vec![0.0; n * c];
            for (r, &i) in ids.iter().enumerate() {
                for j in 0..c {
                    out[i * c + j] += g.data()[r * c + j];
                }
            }
            Tensor::from_vec(&[n, c], out)
        })
    }

    /// Applies fixed interpolation/pooling weights to the rows of `src`.
    pub fn sparse_rows(&mut self, src: Var, taps: Rc<SparseTaps>) -> Var {
        let s = self.value(src);
        let (n, c) = (s.rows(), s.cols());
        let m = taps.rows();
        let mut out = vec![0.0; m * c];
        for r in 0..m {
            let dst = &mut out[r * c..(r + 1) * c];
            for t in taps.offsets[r]..taps.offsets[r + 1] {
                let (i, w) = (taps.index[t], taps.weight[t]);
                debug_assert!(i < n);
                for (d, x) in dst.iter_mut().zip(s.row(i)) {
                    *d += w * x;
                }
            }
        }
        self.unary(src, Tensor::from_vec(&[m, c], out), move |g, _, _| {
            let mut gs = vec![0.0; n * c];
            for r in 0..m {
                let gr = &g.data()[r * c..(r + 1) * c];
                for t in taps.offsets[r]..taps.offsets[r + 1] {
                    let (i, w) = (taps.index[t], taps.weight[t]);
                    for (d, x) in gs[i * c..(i + 1) * c].iter_mut().zip(gr) {
                        *d += w * x;
                    }
                }
            }
            Tensor::from_vec(&[n, c], gs)
        })
    }

    /// Channelwise max over each row group; empty groups yield zeros.
    pub fn max_pool_groups(&mut self, src: Var, groups: &[Vec<usize>]) -> Var {
        let s = self.value(src);
        let (n, c) = (s.rows(), s.cols());
        let mut out = vec![0.0; groups.len() * c];
        let mut arg = vec![usize::MAX; groups.len() * c];
        for (gi, grp) in groups.iter().enumerate() {
            for j in 0..c {
                let mut best = f64::NEG_INFINITY;
                for &r in grp {
                    let x = s.data()[r * c + j];
                    if x > best {
                        best = x;
                        arg[gi * c + j] = r;
                    }
                }
                if !grp.is_empty() {
                    out[gi * c + j] = best;
                }
            }
        }
        let g_rows = groups.len();
        self.unary(src, Tensor::from_vec(&[g_rows, c], out), move |g, _, _| {
            let mut gs = vec![0.0; n * c];
            for gi in 0..g_rows {
                for j in 0..c {
                    let r = arg[gi * c + j];
                    if r != usize::MAX {
                        gs[r * c + j] += g.data()[gi * c + j];
                    }
                }
            }
            Tensor::from_vec(&[n, c], gs)
        })
    }

    // ---- reductions and normalization --------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.unary(a, v, |g, x, _| Tensor::full(x.shape(), g.item()))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let v = Tensor::scalar(self.value(a).sum() / n);
        self.unary(a, v, move |g, x, _| Tensor::full(x.shape(), g.item() / n))
    }

    /// `Σ a_i w_i` with fixed weights.
    pub fn weighted_sum(&mut self, a: Var, weights: Vec<f64>) -> Var {
        assert_eq!(weights.len(), self.value(a).numel(), "weighted_sum size mismatch");
        let v: f64 = self.value(a).data().iter().zip(&weights).map(|(x, w)| x * w).sum();
        self.unary(a, Tensor::scalar(v), move |g, x, _| {
            let gi = g.item();
            Tensor::from_vec(x.shape(), weights.iter().map(|w| w * gi).collect())
        })
    }

    /// Sum of several scalars.
    pub fn add_all(&mut self, parts: &[Var]) -> Var {
        let mut acc = parts[0];
        for &p in &parts[1..] {
            acc = self.add(acc, p);
        }
        acc
    }

    /// Row-wise softmax; `mask[r * cols + c] == false` excludes an entry. Rows
    /// with no admissible entry produce zeros.
    pub fn softmax(&mut self, a: Var, mask: Option<Rc<Vec<bool>>>) -> Var {
        let t = self.value(a);
        let (rows, cols) = (t.rows(), t.cols());
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = t.row(r);
            let ok = |j: usize| mask.as_ref().is_none_or(|m| m[r * cols + j]);
            let mx = (0..cols)
                .filter(|&j| ok(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if mx == f64::NEG_INFINITY {
                continue;
            }
            let mut z = 0.0;
            for j in 0..cols {
                if ok(j) {
                    let e = (row[j] - mx).exp();
                    out[r * cols + j] = e;
                    z += e;
                }
            }
            for x in &mut out[r * cols..(r + 1) * cols] {
                *x /= z;
            }
        }
        self.unary(a, Tensor::from_vec(&[rows, cols], out), move |g, _, p| {
            let mut gx = vec![0.0; rows * cols];
            for r in 0..rows {
                let pr = p.row(r);
                let gr = &g.data()[r * cols..(r + 1) * cols];
                let dot: f64 = pr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for j in 0..cols {
                    gx[r * cols + j] = pr[j] * (gr[j] - dot);
                }
            }
            Tensor::from_vec(&[rows, cols], gx)
        })
    }

    /// Normalizes each row to zero mean and unit variance (no affine terms).
    pub fn layer_norm(&mut self, a: Var) -> Var {
        const EPS: f64 = 1e-5;
        let t = self.value(a);
        let (rows, cols) = (t.rows(), t.cols());
        let mut out = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = t.row(r);
            let mu = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + EPS).sqrt();
            inv_std[r] = is;
            for j in 0..cols {
                out[r * cols + j] = (row[j] - mu) * is;
            }
        }
        self.unary(a, Tensor::from_vec(&[rows, cols], out), move |g, _, y| {
            let mut gx = vec![0.0; rows * cols];
            for r in 0..rows {
                let yr = y.row(r);
                let gr = &g.data()[r * cols..(r + 1) * cols];
                let mg = gr.iter().sum::<f64>() / cols as f64;
                let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                for j in 0..cols {
                    gx[r * cols + j] = inv_std[r] * (gr[j] - mg - yr[j] * mgy);
                }
            }
            Tensor::from_vec(&[rows, cols], gx)
        })
    }

    /// Mean token-level negative log-likelihood over rows with a target.
    ///
    /// Panics if no row is supervised; callers validate that first.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Var {
        let t = self.value(logits);
        let (rows, cols) = (t.rows(), t.cols());
        assert_eq!(targets.len(), rows, "one target slot per logit row");
        let count = targets.iter().filter(|t| t.is_some()).count();
        assert!(count > 0, "cross_entropy with no supervised rows");
        let mut probs = vec![0.0; rows * cols];
        let mut loss = 0.0;
        for r in 0..rows {
            let Some(tgt) = targets[r] else { continue };
            let row = t.row(r);
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - mx).exp()).sum();
            let lz = z.ln() + mx;
            loss += lz - row[tgt];
            for j in 0..cols {
                probs[r * cols + j] = (row[j] - lz).exp();
            }
        }
        let n = count as f64;
        let targets = targets.to_vec();
        self.unary(logits, Tensor::scalar(loss / n), move |g, _, _| {
            let gi = g.item() / n;
            let mut gx = vec![0.0; rows * cols];
            for r in 0..rows {
                let Some(tgt) = targets[r] else { continue };
                for j in 0..cols {
                    gx[r * cols + j] = gi * probs[r * cols + j];
                }
                gx[r * cols + tgt] -= gi;
            }
            Tensor::from_vec(&[rows, cols], gx)
        })
    }

    // ---- attention ---------------------------------------------------

    /// Each key row `j` belongs to query row `owner[j]`; every query attends
    /// over its own keys only. Queries without keys produce zero rows.
    pub fn segment_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        owner: Rc<Vec<usize>>,
        scale: f64,
    ) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (nq, d) = (qv.rows(), qv.cols());
        let (nk, dv) = (kv.rows(), vv.cols());
        assert_eq!(kv.cols(), d);
        assert_eq!(vv.rows(), nk);
        assert_eq!(owner.len(), nk);
        let mut scores = vec![0.0; nk];
        let mut mx = vec![f64::NEG_INFINITY; nq];
        for j in 0..nk {
            let c = owner[j];
            let s = scale * dot(qv.row(c), kv.row(j));
            scores[j] = s;
            mx[c] = mx[c].max(s);
        }
        let mut z = vec![0.0; nq];
        for j in 0..nk {
            scores[j] = (scores[j] - mx[owner[j]]).exp();
            z[owner[j]] += scores[j];
        }
        let mut out = vec![0.0; nq * dv];
        for j in 0..nk {
            let c = owner[j];
            scores[j] /= z[c];
            for (o, x) in out[c * dv..(c + 1) * dv].iter_mut().zip(vv.row(j)) {
                *o += scores[j] * x;
            }
        }
        let probs = scores;
        self.custom(
            Tensor::from_vec(&[nq, dv], out),
            &[q, k, v],
            Box::new(move |g, p, _| {
                let (qv, kv, vv) = (p[0], p[1], p[2]);
                let mut gq = vec![0.0; nq * d];
                let mut gk = vec![0.0; nk * d];
                let mut gv = vec![0.0; nk * dv];
                let mut dp = vec![0.0; nk];
                let mut acc = vec![0.0; nq];
                for j in 0..nk {
                    let c = owner[j];
                    let gc = &g.data()[c * dv..(c + 1) * dv];
                    dp[j] = dot(gc, vv.row(j));
                    acc[c] += probs[j] * dp[j];
                    for (o, x) in gv[j * dv..(j + 1) * dv].iter_mut().zip(gc) {
                        *o += probs[j] * x;
                    }
                }
                for j in 0..nk {
                    let c = owner[j];
                    let ds = scale * probs[j] * (dp[j] - acc[c]);
                    for t in 0..d {
                        gq[c * d + t] += ds * kv.data()[j * d + t];
                        gk[j * d + t] += ds * qv.data()[c * d + t];
                    }
                }
                vec![
                    Some(Tensor::from_vec(&[nq, d], gq)),
                    Some(Tensor::from_vec(&[nk, d], gk)),
                    Some(Tensor::from_vec(&[nk, dv], gv)),
                ]
            }),
        )
    }

    // ---- convolution -------------------------------------------------

    /// 2-D convolution of a single `[ci, h, w]` map with `w: [co, ci, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let geo = {
            let (xs, ws) = (self.value(x).shape(), self.value(w).shape());
            assert_eq!(xs.len(), 3, "conv2d expects [c, h, w]");
            assert_eq!(ws[1], xs[0], "conv2d channel mismatch");
            ConvGeom::new(&[xs[1], xs[2]], xs[0], ws[0], ws[2], stride, pad)
        };
        self.conv_nd(x, w, b, geo)
    }

    /// 3-D convolution (stride 1) of a single `[ci, d, h, w]` volume.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Var, pad: usize) -> Var {
        let geo = {
            let (xs, ws) = (self.value(x).shape(), self.value(w).shape());
            assert_eq!(xs.len(), 4, "conv3d expects [c, d, h, w]");
            assert_eq!(ws[1], xs[0], "conv3d channel mismatch");
            ConvGeom::new(&[xs[1], xs[2], xs[3]], xs[0], ws[0], ws[2], 1, pad)
        };
        self.conv_nd(x, w, b, geo)
    }

    fn conv_nd(&mut self, x: Var, w: Var, b: Var, geo: ConvGeom) -> Var {
        let cols = geo.im2col(self.value(x).data());
        let (co, kk, np) = (geo.co, geo.patch_len(), geo.out_len());
        let mut out = vec![0.0; co * np];
        let bv = self.value(b).data().to_vec();
        for (o, bias) in bv.iter().enumerate() {
            out[o * np..(o + 1) * np].fill(*bias);
        }
        gemm(co, kk, np, self.value(w).data(), false, &cols, false, &mut out, 1.0);
        let mut shape = vec![co];
        shape.extend_from_slice(&geo.out_dims);
        let geo = Rc::new(geo);
        self.custom(
            Tensor::from_vec(&shape, out),
            &[x, w, b],
            Box::new(move |g, p, _| {
                let (xv, wv) = (p[0], p[1]);
                let cols = geo.im2col(xv.data());
                let mut gw = vec![0.0; co * kk];
                gemm(co, np, kk, g.data(), false, &cols, true, &mut gw, 0.0);
                let mut gcols = vec![0.0; kk * np];
                gemm(kk, co, np, wv.data(), true, g.data(), false, &mut gcols, 0.0);
                let gx = geo.col2im(&gcols);
                let gb: Vec<f64> = (0..co).map(|o| g.data()[o * np..(o + 1) * np].iter().sum()).collect();
                vec![
                    Some(Tensor::from_vec(xv.shape(), gx)),
                    Some(Tensor::from_vec(wv.shape(), gw)),
                    Some(Tensor::from_vec(&[co], gb)),
                ]
            }),
        )
    }

    /// Nearest-neighbour upsampling of a `[c, h, w]` map by an integer factor.
    pub fn upsample_nearest2d(&mut self, x: Var, factor: usize) -> Var {
        let s = self.value(x).shape().to_vec();
        let (c, h, w) = (s[0], s[1], s[2]);
        let (ho, wo) = (h * factor, w * factor);
        let xv = self.value(x).data();
        let mut out = vec![0.0; c * ho * wo];
        for ch in 0..c {
            for i in 0..ho {
                for j in 0..wo {
                    out[(ch * ho + i) * wo + j] = xv[(ch * h + i / factor) * w + j / factor];
                }
            }
        }
        self.unary(x, Tensor::from_vec(&[c, ho, wo], out), move |g, _, _| {
            let mut gx = vec![0.0; c * h * w];
            for ch in 0..c {
                for i in 0..ho {
                    for j in 0..wo {
                        gx[(ch * h + i / factor) * w + j / factor] += g.data()[(ch * ho + i) * wo + j];
                    }
                }
            }
            Tensor::from_vec(&[c, h, w], gx)
        })
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Geometry of a square-kernel convolution over 2 or 3 spatial axes.
struct ConvGeom {
    in_dims: Vec<usize>,
    out_dims: Vec<usize>,
    ci: usize,
    co: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn new(in_dims: &[usize], ci: usize, co: usize, k: usize, stride: usize, pad: usize) -> Self {
        let out_dims = in_dims
            .iter()
            .map(|&n| {
                assert!(n + 2 * pad >= k, "kernel larger than padded input");
                (n + 2 * pad - k) / stride + 1
            })
            .collect();
        Self {
            in_dims: in_dims.to_vec(),
            out_dims,
            ci,
            co,
            k,
            stride,
            pad,
        }
    }

    fn patch_len(&self) -> usize {
        self.ci * self.k.pow(self.in_dims.len() as u32)
    }

    fn out_len(&self) -> usize {
        self.out_dims.iter().product()
    }

    fn in_len(&self) -> usize {
        self.in_dims.iter().product()
    }

    /// Cached [`Self::build_spatial_taps`]; the table depends only on the geometry.
    fn spatial_taps(&self) -> Rc<Vec<Option<usize>>> {
        type Key = (Vec<usize>, usize, usize, usize);
        thread_local! {
            static CACHE: RefCell<HashMap<Key, Rc<Vec<Option<usize>>>>> = RefCell::new(HashMap::new());
        }
        let key = (self.in_dims.clone(), self.k, self.stride, self.pad);
        CACHE.with(|c| c.borrow_mut().entry(key).or_insert_with(|| Rc::new(self.build_spatial_taps())).clone())
    }

    /// Spatial input offset of every `(kernel_tap, out_pos)` pair, `None`
    /// where the tap falls in the padding. Shared by all input channels.
    fn build_spatial_taps(&self) -> Vec<Option<usize>> {
        let nd = self.in_dims.len();
        let kpow = self.k.pow(nd as u32);
        let np = self.out_len();
        let mut table = Vec::with_capacity(kpow * np);
        let mut kidx = vec![0usize; nd];
        let mut oidx = vec![0usize; nd];
        for kflat in 0..kpow {
            let mut rem = kflat;
            for a in (0..nd).rev() {
                kidx[a] = rem % self.k;
                rem /= self.k;
            }
            for o in 0..np {
                let mut rem = o;
                for a in (0..nd).rev() {
                    oidx[a] = rem % self.out_dims[a];
                    rem /= self.out_dims[a];
                }
                let mut off = 0;
                let mut inside = true;
                for a in 0..nd {
                    let pos = (oidx[a] * self.stride + kidx[a]) as isize - self.pad as isize;
                    if pos < 0 || pos as usize >= self.in_dims[a] {
                        inside = false;
                        break;
                    }
                    off = off * self.in_dims[a] + pos as usize;
                }
                table.push(inside.then_some(off));
            }
        }
        table
    }

    /// Visits `(patch_row, out_pos, in_offset)` for every in-bounds tap.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let kpow = self.k.pow(self.in_dims.len() as u32);
        let np = self.out_len();
        let (table, in_len) = (self.spatial_taps(), self.in_len());
        for c in 0..self.ci {
            for kflat in 0..kpow {
                let row = c * kpow + kflat;
                for (o, t) in table[kflat * np..(kflat + 1) * np].iter().enumerate() {
                    if let Some(off) = t {
                        f(row, o, c * in_len + off);
                    }
                }
            }
        }
    }

    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let np = self.out_len();
        let mut cols = vec![0.0; self.patch_len() * np];
        self.for_each_tap(|row, o, off| cols[row * np + o] = x[off]);
        cols
    }

    fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let np = self.out_len();
        let mut x = vec![0.0; self.ci * self.in_len()];
        self.for_each_tap(|row, o, off| x[off] += cols[row * np + o]);
        x
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(Var, ParamId)>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for every parameter placed on the tape; parameters the loss
    /// does not reach receive explicit zeros.
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor)> {
        self.params
            .iter()
            .zip(&self.shapes)
            .map(|(&(v, id), shape)| {
                let g = self.grads[v.0].clone().unwrap_or_else(|| Tensor::zeros(shape));
                (id, g)
            })
            .collect()
    }
}

/// Central finite differences of a scalar function at `x`.
pub fn finite_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Builds a graph from `inputs`, reduces the output with fixed random
    /// weights, and compares analytic input gradients with finite differences.
    fn check(inputs: Vec<Tensor>, build: impl Fn(&mut Graph, &[Var]) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let probe_out = {
            let mut g = Graph::new();
            let vs: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
            let y = build(&mut g, &vs);
            g.value(y).numel()
        };
        let weights: Vec<f64> = Tensor::randn(&[probe_out], 1.0, &mut rng).into_data();
        let eval = |ins: &[Tensor]| -> f64 {
            let mut g = Graph::new();
            let vs: Vec<Var> = ins.iter().map(|t| g.leaf(t.clone())).collect();
            let y = build(&mut g, &vs);
            g.value(y).data().iter().zip(&weights).map(|(a, b)| a * b).sum()
        };
        let mut g = Graph::new();
        let vs: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let y = build(&mut g, &vs);
        let l = g.weighted_sum(y, weights.clone());
        let grads = g.backward(l);
        for (k, t) in inputs.iter().enumerate() {
            let fd = finite_difference(
                |x| {
                    let mut ins = inputs.clone();
                    ins[k] = Tensor::from_vec(t.shape(), x.to_vec());
                    eval(&ins)
                },
                t.data(),
                1e-6,
            );
            let an = grads.get(vs[k]).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
            for (i, (a, f)) in an.data().iter().zip(&fd).enumerate() {
                assert!(rel_err(*a, *f, 1e-6) < 1e-5, "input {k} elem {i}: {a} vs {f}");
            }
        }
    }

    fn rnd(shape: &[usize], seed: u64) -> Tensor {
        Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn grad_elementwise_and_broadcast() {
        check(vec![rnd(&[3, 4], 1), rnd(&[3, 4], 2), rnd(&[4], 3)], |g, v| {
            let a = g.mul(v[0], v[1]);
            let b = g.add_row(a, v[2]);
            let c = g.mul_row(b, v[2]);
            let d = g.silu(c);
            let e = g.tanh(d);
            g.sub(e, v[1])
        });
        check(vec![rnd(&[3, 4], 4), rnd(&[3], 5)], |g, v| g.mul_col(v[0], v[1]));
    }

    #[test]
    fn grad_matmul_family() {
        check(vec![rnd(&[3, 5], 1), rnd(&[5, 2], 2)], |g, v| g.matmul(v[0], v[1]));
        check(vec![rnd(&[3, 5], 3), rnd(&[4, 5], 4)], |g, v| g.matmul_nt(v[0], v[1]));
        check(vec![rnd(&[2, 3, 4], 5)], |g, v| g.permute(v[0], &[2, 0, 1]));
    }

    #[test]
    fn grad_softmax_layernorm_ce() {
        let mask = Rc::new(vec![true, false, true, true, true, true, false, false, true]);
        check(vec![rnd(&[3, 3], 1)], move |g, v| g.softmax(v[0], Some(mask.clone())));
        check(vec![rnd(&[4, 6], 2)], |g, v| g.layer_norm(v[0]));
        check(vec![rnd(&[4, 7], 3)], |g, v| {
            g.cross_entropy(v[0], &[Some(1), None, Some(6), Some(0)])
        });
    }

    #[test]
    fn grad_slicing_and_gathers() {
        check(vec![rnd(&[5, 3], 1), rnd(&[2, 3], 2)], |g, v| {
            let a = g.concat_rows(&[v[0], v[1]]);
            let b = g.slice_rows(a, 2, 6);
            let c = g.slice_cols(b, 1, 3);
            let d = g.concat_cols(&[c, b]);
            g.gather_rows(d, &[0, 3, 3, 1])
        });
        let mut taps = SparseTaps::new();
        taps.push(0, 0.25);
        taps.push(3, 0.75);
        taps.finish_row();
        taps.finish_row();
        taps.push(2, -1.5);
        taps.finish_row();
        let taps = Rc::new(taps);
        check(vec![rnd(&[4, 3], 3)], move |g, v| g.sparse_rows(v[0], taps.clone()));
        check(vec![rnd(&[6, 2], 4)], |g, v| {
            g.max_pool_groups(v[0], &[vec![0, 1, 2], vec![3, 5], vec![]])
        });
    }

    #[test]
    fn grad_segment_attention() {
        let owner = Rc::new(vec![0, 0, 2, 2, 2, 0]);
        check(
            vec![rnd(&[3, 4], 1), rnd(&[6, 4], 2), rnd(&[6, 3], 3)],
            move |g, v| g.segment_attention(v[0], v[1], v[2], owner.clone(), 0.5),
        );
    }

    #[test]
    fn grad_convolutions() {
        check(vec![rnd(&[2, 5, 6], 1), rnd(&[3, 2, 3, 3], 2), rnd(&[3], 3)], |g, v| {
            g.conv2d(v[0], v[1], v[2], 2, 1)
        });
        check(vec![rnd(&[2, 3, 4, 3], 4), rnd(&[2, 2, 3, 3, 3], 5), rnd(&[2], 6)], |g, v| {
            g.conv3d(v[0], v[1], v[2], 1)
        });
        check(vec![rnd(&[2, 2, 3], 7)], |g, v| g.upsample_nearest2d(v[0], 2));
    }

    #[test]
    fn conv2d_matches_direct_sum() {
        let x = rnd(&[2, 4, 5], 9);
        let w = rnd(&[3, 2, 3, 3], 10);
        let b = rnd(&[3], 11);
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
        let y = g.conv2d(xv, wv, bv, 2, 1);
        let yv = g.value(y);
        assert_eq!(yv.shape(), &[3, 2, 3]);
        for o in 0..3 {
            for i in 0..2 {
                for j in 0..3 {
                    let mut acc = b.data()[o];
                    for c in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (yy, xx) = (i as isize * 2 + ky - 1, j as isize * 2 + kx - 1);
                                if (0..4).contains(&yy) && (0..5).contains(&xx) {
                                    acc += w.data()[((o * 2 + c) * 3 + ky as usize) * 3 + kx as usize]
                                        * x.data()[(c * 4 + yy as usize) * 5 + xx as usize];
                                }
                            }
                        }
                    }
                    assert!((yv.data()[(o * 2 + i) * 3 + j] - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(&[2], vec![1.0, 2.0]));
        let d = g.detach(x);
        let y = g.mul(x, d);
        let s = g.sum(y);
        let grads = g.backward(s);
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn unused_params_get_zero_grads() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::scalar(3.0));
        let b = store.add("b", Tensor::from_vec(&[2], vec![1.0, 1.0]));
        let mut g = Graph::new();
        let av = g.param(&store, a);
        let _bv = g.param(&store, b);
        let again = g.param(&store, a);
        assert_eq!(av, again);
        let y = g.square(av);
        let grads = g.backward(y);
        let pg = grads.param_grads();
        assert_eq!(pg[0].1.item(), 6.0);
        assert_eq!(pg[1].1.data(), &[0.0, 0.0]);
    }
}
