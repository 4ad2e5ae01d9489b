//! Current-to-future link: attention blocks carrying `B_t` to each horizon.

use rand::Rng;

use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::language_core::motion_features;
use crate::nn::{Activation, Init, Linear, Mlp, MultiHeadAttention};
use crate::render::Renderer;
use crate::scene_synth::EgoMotion;
use crate::tensor::Tensor;

/// Future grids `[z·c', w, h]`, one per horizon step.
#[derive(Clone, Debug)]
pub struct FutureBEVSet {
    pub grids: Vec<Var>,
}

/// Out-projection from LLM width back to the compressed channel width,
/// followed by the renderer's ×4 upsampling.
#[derive(Clone, Debug)]
pub struct BevHead {
    pub out: Linear,
    pub w4: usize,
}

impl BevHead {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Self {
        Self {
            out: Linear::new(store, "bev_out", cfg.llm_dim, 4 * cfg.bev_c, true, Init::Default, rng),
            w4: cfg.compressed_w(),
        }
    }

    /// `[L, C_llm]` → `[4c, w/4, h/4]`.
    pub fn compressed(&self, g: &mut Graph, store: &ParamStore, rows: Var) -> Var {
        let r = self.out.forward(g, store, rows);
        let t = g.transpose(r);
        g.reshape(t, &[self.out.d_out, self.w4, self.w4])
    }

    pub fn grid(&self, g: &mut Graph, store: &ParamStore, renderer: &Renderer, rows: Var) -> Var {
        let c = self.compressed(g, store, rows);
        renderer.upsample(g, store, c)
    }
}

/// Layer norm then `(γ+1) ⊙ LN(x) + β`; `gamma`/`beta` are `[C]` rows.
pub fn ego_modulation(g: &mut Graph, x: Var, gamma: Option<Var>, beta: Option<Var>) -> Var {
    let n = g.layer_norm(x);
    match (gamma, beta) {
        (Some(gm), Some(b)) => {
            let scaled = g.mul_row(n, gm);
            let m = g.add(scaled, n);
            g.add_row(m, b)
        }
        _ => n,
    }
}

#[derive(Clone, Debug)]
pub struct LinkBlock {
    pub cross: MultiHeadAttention,
    pub attn: MultiHeadAttention,
    pub ff: Mlp,
    /// Motion → `[γ_sa, β_sa, γ_ff, β_ff]`, tanh-bounded.
    pub modulation: Mlp,
    /// Scalar gain on the modulation output, zero at start.
    pub gain: ParamId,
}

impl LinkBlock {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.llm_dim;
        let h = cfg.link_heads;
        Self {
            cross: MultiHeadAttention::new(store, &format!("{name}.cross"), d, d, h, Init::Default, Init::Zeros, rng),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), d, d, h, Init::Default, Init::Zeros, rng),
            ff: Mlp::new(store, &format!("{name}.ff"), &[d, 4 * d, d], Activation::Silu, Init::Zeros, rng),
            modulation: Mlp::new(
                store,
                &format!("{name}.em"),
                &[4, cfg.modulation_hidden, 4 * d],
                Activation::Silu,
                Init::Default,
                rng,
            ),
            gain: store.add(format!("{name}.em_gain"), Tensor::zeros(&[1])),
        }
    }

    /// `[γ_sa, β_sa, γ_ff, β_ff]` for one `[1, 4]` motion row.
    pub fn modulation_params(&self, g: &mut Graph, store: &ParamStore, motion: Var) -> [Var; 4] {
        let m = self.modulation.forward(g, store, motion);
        let m = g.tanh(m);
        let gain = g.param(store, self.gain);
        let d = g.shape(m)[1] / 4;
        let m = g.reshape(m, &[4, d]);
        let ones = g.constant(Tensor::full(&[4, 1], 1.0));
        let gain = g.reshape(gain, &[1, 1]);
        let gains = g.matmul(ones, gain);
        let scaled = g.mul_col(m, gains);
        [0, 1, 2, 3].map(|k| g.slice_rows(scaled, k, k + 1))
    }

    /// One block against prepared keys. `modulation` is `None` when EM is off.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        keys: Var,
        pos: Var,
        modulation: Option<[Var; 4]>,
    ) -> Var {
        let c_in = g.layer_norm(x);
        let c = self.cross.forward(g, store, c_in, keys, None);
        let x = g.add(x, c);
        let [gs, bs, gf, bf] = match modulation {
            Some(m) => m.map(Some),
            None => [None; 4],
        };
        let a_in = ego_modulation(g, x, gs, bs);
        let a_in = g.add(a_in, pos);
        let a = self.attn.forward(g, store, a_in, a_in, None);
        let x = g.add(x, a);
        let f_in = ego_modulation(g, x, gf, bf);
        let f = self.ff.forward(g, store, f_in);
        g.add(x, f)
    }
}

#[derive(Clone, Debug)]
pub struct FutureLink {
    pub blocks: Vec<LinkBlock>,
    /// Learnable positions for the self-attention branch, `[L, C_llm]`.
    pub pos: ParamId,
    /// Source tags added to query keys (row 0) and text keys (row 1).
    pub source_tags: ParamId,
    pub enabled: bool,
    pub textual_injection: bool,
    pub ego_modulation: bool,
    pub horizon: usize,
    pub n: usize,
}

impl FutureLink {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.llm_dim;
        Self {
            blocks: (0..cfg.link_blocks)
                .map(|i| LinkBlock::new(store, &format!("link.block{i}"), cfg, rng))
                .collect(),
            pos: store.add("link.pos", Tensor::randn(&[cfg.bev_tokens(), d], 0.1, rng)),
            source_tags: store.add("link.source_tags", Tensor::randn(&[2, d], 0.1, rng)),
            enabled: cfg.link_enabled,
            textual_injection: cfg.textual_injection,
            ego_modulation: cfg.ego_modulation,
            horizon: cfg.horizon,
            n: cfg.queries_per_step,
        }
    }

    /// Key/value source for group `i`: tagged queries, then tagged text unless
    /// textual injection is off. `text_first` flips the concatenation order.
    pub fn keys(&self, g: &mut Graph, store: &ParamStore, group: Var, text: Var, text_first: bool) -> Var {
        let tags = g.param(store, self.source_tags);
        let tq = g.slice_rows(tags, 0, 1);
        let q = g.add_row(group, tq);
        if !self.textual_injection {
            return q;
        }
        let tt = g.slice_rows(tags, 1, 2);
        let t = g.add_row(text, tt);
        if text_first {
            g.concat_rows(&[t, q])
        } else {
            g.concat_rows(&[q, t])
        }
    }

    /// Runs the block stack for a single horizon, returning `[L, C_llm]`.
    pub fn propagate_one(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        bev: Var,
        group: Var,
        text: Var,
        motion: &EgoMotion,
    ) -> Var {
        let keys = self.keys(g, store, group, text, false);
        let pos = g.param(store, self.pos);
        let m = g.constant(motion_features(std::slice::from_ref(motion), self.horizon));
        let mut x = bev;
        for b in &self.blocks {
            let md = self.ego_modulation.then(|| b.modulation_params(g, store, m));
            x = b.forward(g, store, x, keys, pos, md);
        }
        x
    }

    /// `queries` holds `Δt·n` group-major rows; returns one upsampled grid per
    /// horizon. A disabled link copies `B_t` to every horizon.
    #[allow(clippy::too_many_arguments)]
    pub fn propagate(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        head: &BevHead,
        renderer: &Renderer,
        bev: Var,
        queries: Var,
        text: Var,
        motions: &[EgoMotion],
    ) -> Result<FutureBEVSet> {
        if motions.len() < self.horizon {
            return Err(Error::InvalidArgument(format!(
                "missing ego motion: {} given for a horizon of {}",
                motions.len(),
                self.horizon
            )));
        }
        if g.shape(queries)[0] != self.horizon * self.n {
            return Err(Error::Shape(format!(
                "{} query rows for {} groups of {}",
                g.shape(queries)[0],
                self.horizon,
                self.n
            )));
        }
        let mut grids = Vec::with_capacity(self.horizon);
        for (i, motion) in motions.iter().take(self.horizon).enumerate() {
            let x = if self.enabled {
                let group = g.slice_rows(queries, i * self.n, (i + 1) * self.n);
                self.propagate_one(g, store, bev, group, text, motion)
            } else {
                bev
            };
            grids.push(head.grid(g, store, renderer, x));
        }
        Ok(FutureBEVSet { grids })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> ModelConfig {
        ModelConfig { llm_dim: 8, link_heads: 2, link_blocks: 2, modulation_hidden: 6, ..ModelConfig::ci() }
    }

    fn motions() -> Vec<EgoMotion> {
        (1..=3)
            .map(|i| EgoMotion { delta_position: [1.5 * i as f64, 0.2 * i as f64], delta_yaw: 0.05 * i as f64, horizon_index: i })
            .collect()
    }

    struct Fixture {
        store: ParamStore,
        link: FutureLink,
        head: BevHead,
        renderer: Renderer,
        cfg: ModelConfig,
        bev: Tensor,
        queries: Tensor,
        text: Tensor,
    }

    fn fixture(cfg: ModelConfig, seed: u64) -> Fixture {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let link = FutureLink::new(&mut store, &cfg, &mut rng);
        let head = BevHead::new(&mut store, &cfg, &mut rng);
        let renderer = Renderer::new(&mut store, &cfg, &mut rng);
        let bev = Tensor::randn(&[cfg.bev_tokens(), cfg.llm_dim], 1.0, &mut rng);
        let queries = Tensor::randn(&[cfg.query_tokens(), cfg.llm_dim], 1.0, &mut rng);
        let text = Tensor::randn(&[cfg.pooled_text, cfg.llm_dim], 1.0, &mut rng);
        Fixture { store, link, head, renderer, cfg, bev, queries, text }
    }

    /// Randomizes every zero-initialized tensor in the link so all paths are live.
    fn wake(store: &mut ParamStore, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for id in store.ids_with_prefix("link.").collect::<Vec<_>>() {
            let t = store.get_mut(id);
            if t.data().iter().all(|&x| x == 0.0) {
                let shape = t.shape().to_vec();
                *t = Tensor::randn(&shape, 0.3, &mut rng);
            }
        }
    }

    impl Fixture {
        fn run(&self, queries: &Tensor, text: &Tensor, motions: &[EgoMotion]) -> Vec<Tensor> {
            let mut g = Graph::new();
            let b = g.constant(self.bev.clone());
            let q = g.constant(queries.clone());
            let t = g.constant(text.clone());
            let set = self
                .link
                .propagate(&mut g, &self.store, &self.head, &self.renderer, b, q, t, motions)
                .unwrap();
            set.grids.iter().map(|&v| g.value(v).clone()).collect()
        }

        fn upsampled_bev(&self) -> Tensor {
            let mut g = Graph::new();
            let b = g.constant(self.bev.clone());
            let v = self.head.grid(&mut g, &self.store, &self.renderer, b);
            g.value(v).clone()
        }
    }

    #[test]
    fn modulation_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(&[1, 4], vec![1.0, 2.0, 3.0, 6.0]));
        let ln = g.layer_norm(x);
        let ln = g.value(ln).clone();
        let z = g.constant(Tensor::zeros(&[1, 4]));
        let id = ego_modulation(&mut g, x, Some(z), Some(z));
        assert_eq!(g.value(id), &ln);
        let one = g.constant(Tensor::full(&[1, 4], 1.0));
        let two = ego_modulation(&mut g, x, Some(one), Some(z));
        assert!(g.value(two).max_abs_diff(&ln.map(|v| 2.0 * v)) < 1e-15);
        let c = g.constant(Tensor::full(&[1, 4], 3.0));
        let beta = g.constant(Tensor::from_vec(&[1, 4], vec![0.1, -0.2, 0.3, 0.4]));
        let out = ego_modulation(&mut g, c, Some(one), Some(beta));
        assert!(g.value(out).max_abs_diff(g.value(beta)) < 1e-12);
    }

    #[test]
    fn identity_at_init() {
        let f = fixture(cfg(), 1);
        let grids = f.run(&f.queries, &f.text, &motions());
        assert_eq!(grids.len(), 3);
        let up = f.upsampled_bev();
        for gr in &grids {
            assert_eq!(gr.shape(), up.shape());
            assert!(gr.max_abs_diff(&up) < 1e-10);
        }
        assert_eq!(up.shape(), &[f.cfg.vol_z * f.cfg.vol_c, f.cfg.bev_w, f.cfg.bev_w]);
    }

    #[test]
    fn block_with_silent_outputs_is_identity() {
        let f = fixture(cfg(), 2);
        let mut g = Graph::new();
        let x = g.constant(f.bev.clone());
        let q = g.constant(f.queries.slice_rows_for_test(0, 4));
        let t = g.constant(f.text.clone());
        let keys = f.link.keys(&mut g, &f.store, q, t, false);
        let pos = g.param(&f.store, f.link.pos);
        let y = f.link.blocks[0].forward(&mut g, &f.store, x, keys, pos, None);
        assert_eq!(g.value(y), &f.bev);
    }

    #[test]
    fn key_source_order_is_irrelevant() {
        let mut f = fixture(cfg(), 3);
        wake(&mut f.store, 30);
        let run = |text_first: bool| {
            let mut g = Graph::new();
            let x = g.constant(f.bev.clone());
            let q = g.constant(f.queries.slice_rows_for_test(4, 8));
            let t = g.constant(f.text.clone());
            let keys = f.link.keys(&mut g, &f.store, q, t, text_first);
            let pos = g.param(&f.store, f.link.pos);
            let y = f.link.blocks[0].forward(&mut g, &f.store, x, keys, pos, None);
            g.value(y).clone()
        };
        assert!(run(false).max_abs_diff(&run(true)) < 1e-12);
    }

    #[test]
    fn textual_injection_switch() {
        let mut on = fixture(cfg(), 4);
        wake(&mut on.store, 40);
        let mut off = fixture(ModelConfig { textual_injection: false, ..cfg() }, 4);
        wake(&mut off.store, 40);
        let m = motions();
        let t2 = on.text.map(|v| v + 1.0);
        assert!(on.run(&on.queries, &on.text, &m)[0].max_abs_diff(&on.run(&on.queries, &t2, &m)[0]) > 1e-9);
        assert_eq!(off.run(&off.queries, &off.text, &m), off.run(&off.queries, &t2, &m));
    }

    #[test]
    fn distinct_motions_give_distinct_grids() {
        let mut f = fixture(cfg(), 5);
        wake(&mut f.store, 50);
        // Same query group for every horizon so only the motion differs.
        let mut q = f.queries.clone();
        let g0 = q.data()[..4 * 8].to_vec();
        for i in 1..3 {
            q.data_mut()[i * 32..(i + 1) * 32].copy_from_slice(&g0);
        }
        let grids = f.run(&q, &f.text, &motions());
        assert!(grids[0].max_abs_diff(&grids[1]) > 1e-9);
        // Without modulation the grids coincide.
        let mut nm = fixture(ModelConfig { ego_modulation: false, ..cfg() }, 5);
        wake(&mut nm.store, 50);
        let grids = nm.run(&q, &nm.text, &motions());
        assert!(grids[0].max_abs_diff(&grids[1]) < 1e-12);
    }

    #[test]
    fn horizons_are_isolated() {
        let mut f = fixture(cfg(), 6);
        wake(&mut f.store, 60);
        let m = motions();
        let base = f.run(&f.queries, &f.text, &m);
        let mut q = f.queries.clone();
        for v in &mut q.data_mut()[4 * 8..8 * 8] {
            *v += 0.7;
        }
        let moved = f.run(&q, &f.text, &m);
        assert_eq!(moved[0], base[0]);
        assert_eq!(moved[2], base[2]);
        assert!(moved[1].max_abs_diff(&base[1]) > 1e-9);
    }

    #[test]
    fn disabled_link_copies_current_bev() {
        let mut f = fixture(ModelConfig { link_enabled: false, ..cfg() }, 7);
        wake(&mut f.store, 70);
        let up = f.upsampled_bev();
        for gr in f.run(&f.queries, &f.text, &motions()) {
            assert_eq!(gr, up);
        }
    }

    #[test]
    fn missing_motion_rejected() {
        let f = fixture(cfg(), 8);
        let mut g = Graph::new();
        let b = g.constant(f.bev.clone());
        let q = g.constant(f.queries.clone());
        let t = g.constant(f.text.clone());
        let r = f.link.propagate(&mut g, &f.store, &f.head, &f.renderer, b, q, t, &motions()[..2]);
        assert!(matches!(r, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn conditioning_gradients_after_a_step() {
        let f0 = fixture(cfg(), 9);
        // At init the zero output projections block the conditioning path;
        // one gradient step on those projections opens it.
        let mut store = f0.store.clone();
        let grads = {
            let mut g = Graph::new();
            let b = g.constant(f0.bev.clone());
            let q = g.constant(f0.queries.clone());
            let t = g.constant(f0.text.clone());
            let set = f0.link.propagate(&mut g, &store, &f0.head, &f0.renderer, b, q, t, &motions()).unwrap();
            let sq = g.square(set.grids[0]);
            let l = g.sum(sq);
            g.backward(l).param_grads()
        };
        for (id, gr) in grads {
            if store.name(id).starts_with("link.") {
                let mut step = gr.clone();
                step.scale_assign(-1e-3);
                store.get_mut(id).add_assign(&step);
            }
        }
        let mut g = Graph::new();
        let b = g.constant(f0.bev.clone());
        let q = g.leaf(f0.queries.clone());
        let t = g.leaf(f0.text.clone());
        let set = f0.link.propagate(&mut g, &store, &f0.head, &f0.renderer, b, q, t, &motions()).unwrap();
        let sq = g.square(set.grids[0]);
        let l = g.sum(sq);
        let gr = g.backward(l);
        let gq = gr.get(q).unwrap();
        assert!(gq.data()[..32].iter().map(|x| x * x).sum::<f64>() > 0.0);
        assert!(gq.data()[32..].iter().all(|&x| x == 0.0));
        assert!(gr.get(t).unwrap().sq_norm() > 0.0);
    }

    trait SliceRows {
        fn slice_rows_for_test(&self, s: usize, e: usize) -> Tensor;
    }

    impl SliceRows for Tensor {
        fn slice_rows_for_test(&self, s: usize, e: usize) -> Tensor {
            let c = self.cols();
            Tensor::from_vec(&[e - s, c], self.data()[s * c..e * c].to_vec())
        }
    }
}
