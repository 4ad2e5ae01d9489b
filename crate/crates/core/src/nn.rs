//! Parameterized layers on top of the tape.

use rand::Rng;

use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Uniform in ±1/√fan_in.
    Default,
    Zeros,
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let w = match init {
            Init::Default => Tensor::uniform(&[d_in, d_out], 1.0 / (d_in as f64).sqrt(), rng),
            Init::Zeros => Tensor::zeros(&[d_in, d_out]),
        };
        let w = store.add(format!("{name}.w"), w);
        let b = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(&[d_out])));
        Self { w, b, d_in, d_out }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = self.b.map(|b| g.param(store, b));
        g.linear(x, w, b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Silu,
    Tanh,
}

pub fn activate(g: &mut Graph, x: Var, act: Activation) -> Var {
    match act {
        Activation::Relu => g.relu(x),
        Activation::Silu => g.silu(x),
        Activation::Tanh => g.tanh(x),
    }
}

/// Stack of linear layers with an activation between consecutive layers.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub act: Activation,
}

impl Mlp {
    /// `widths = [in, hidden.., out]`. The final layer uses `last_init`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        widths: &[usize],
        act: Activation,
        last_init: Init,
        rng: &mut R,
    ) -> Self {
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let init = if i + 1 == n { last_init } else { Init::Default };
                Linear::new(store, &format!("{name}.{i}"), widths[i], widths[i + 1], true, init, rng)
            })
            .collect();
        Self { layers, act }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, store, h);
            if i + 1 < self.layers.len() {
                h = activate(g, h, self.act);
            }
        }
        h
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
    pub spatial_dims: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        spatial_dims: usize,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let mut shape = vec![c_out, c_in];
        shape.extend(std::iter::repeat_n(kernel, spatial_dims));
        let fan_in = c_in * kernel.pow(spatial_dims as u32);
        let w = match init {
            Init::Default => Tensor::uniform(&shape, (3.0 / fan_in as f64).sqrt(), rng),
            Init::Zeros => Tensor::zeros(&shape),
        };
        Self {
            w: store.add(format!("{name}.w"), w),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[c_out])),
            stride,
            pad,
            spatial_dims,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        match self.spatial_dims {
            2 => g.conv2d(x, w, b, self.stride, self.pad),
            3 => {
                assert_eq!(self.stride, 1, "conv3d is stride-1 only");
                g.conv3d(x, w, b, self.pad)
            }
            d => panic!("unsupported conv rank {d}"),
        }
    }
}

/// Multi-head scaled dot-product attention with separate q/k/v/out maps.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        d_kv_in: usize,
        heads: usize,
        value_init: Init,
        out_init: Init,
        rng: &mut R,
    ) -> Self {
        assert_eq!(d_model % heads, 0, "heads must divide model width");
        Self {
            q: Linear::new(store, &format!("{name}.q"), d_model, d_model, true, Init::Default, rng),
            k: Linear::new(store, &format!("{name}.k"), d_kv_in, d_model, true, Init::Default, rng),
            v: Linear::new(store, &format!("{name}.v"), d_kv_in, d_model, true, value_init, rng),
            out: Linear::new(store, &format!("{name}.o"), d_model, d_model, true, out_init, rng),
            heads,
        }
    }

    /// `mask[i * n_kv + j]` admits key `j` for query `i`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x_q: Var,
        x_kv: Var,
        mask: Option<std::rc::Rc<Vec<bool>>>,
    ) -> Var {
        let q = self.q.forward(g, store, x_q);
        let k = self.k.forward(g, store, x_kv);
        let v = self.v.forward(g, store, x_kv);
        let d = self.q.d_out;
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (s, e) = (h * dh, (h + 1) * dh);
            let qh = g.slice_cols(q, s, e);
            let kh = g.slice_cols(k, s, e);
            let vh = g.slice_cols(v, s, e);
            let scores = g.matmul_nt(qh, kh);
            let scores = g.scale(scores, scale);
            let p = g.softmax(scores, mask.clone());
            heads.push(g.matmul(p, vh));
        }
        let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads) };
        self.out.forward(g, store, cat)
    }
}

/// Causal mask for a length-`n` self-attention.
pub fn causal_mask(n: usize) -> std::rc::Rc<Vec<bool>> {
    std::rc::Rc::new((0..n * n).map(|i| i % n <= i / n).collect())
}
