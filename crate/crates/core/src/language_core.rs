//! Small causal transformer over `[BEV tokens; text; world queries]`.

use std::collections::HashMap;
use std::rc::Rc;

use rand::Rng;

use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::config::{ModelConfig, QueryInit};
use crate::error::{Error, Result};
use crate::nn::{causal_mask, Activation, Init, Linear, Mlp, MultiHeadAttention};
use crate::scene_synth::{caption_words, EgoMotion};
use crate::tensor::Tensor;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const SEP: usize = 2;
pub const EOS: usize = 3;
pub const UNK: usize = 4;
const SPECIALS: [&str; 5] = ["<pad>", "<bos>", "<sep>", "<eos>", "<unk>"];
const VOCAB_HEADER: &str = "bevworld-vocab 1";

/// Closed whitespace vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_words<S: AsRef<str>>(words: &[S]) -> Self {
        let mut all: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        for w in words {
            if !all.iter().any(|x| x == w.as_ref()) {
                all.push(w.as_ref().to_string());
            }
        }
        let index = all.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { words: all, index }
    }

    /// Every word the caption templates can produce.
    pub fn templates() -> Self {
        Self::from_words(&caption_words())
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|w| *self.index.get(w).unwrap_or(&UNK)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i >= SPECIALS.len())
            .map(|&i| self.words.get(i).map_or("<unk>", String::as_str))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Header line then one token per line, id order.
    pub fn to_file_string(&self) -> String {
        let mut s = format!("{VOCAB_HEADER}\n");
        for w in &self.words {
            s.push_str(w);
            s.push('\n');
        }
        s
    }

    pub fn from_file_string(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some(VOCAB_HEADER) => {}
            Some(h) if h.starts_with("bevworld-vocab ") => {
                let found = h[15..].trim().parse().unwrap_or(u32::MAX);
                return Err(Error::Version { found, supported: 1 });
            }
            _ => return Err(Error::Corrupt("missing vocabulary header".into())),
        }
        let words: Vec<String> = lines.map(str::to_string).collect();
        if words.len() < SPECIALS.len() || words[..SPECIALS.len()].iter().zip(SPECIALS).any(|(a, b)| a != b) {
            return Err(Error::Corrupt("vocabulary does not start with the special tokens".into()));
        }
        Ok(Self::from_words(&words[SPECIALS.len()..]))
    }
}

/// Text ids `[bos] instruction [sep] answer [eos]` and the next-token
/// targets that supervise the answer span.
pub fn build_text(vocab: &Vocab, instruction: &str, answer: Option<&str>) -> (Vec<usize>, Vec<Option<usize>>) {
    let mut ids = vec![BOS];
    ids.extend(vocab.encode(instruction));
    ids.push(SEP);
    let sep_pos = ids.len() - 1;
    if let Some(a) = answer {
        ids.extend(vocab.encode(a));
        ids.push(EOS);
    }
    let targets = (0..ids.len())
        .map(|p| (p >= sep_pos && p + 1 < ids.len()).then(|| ids[p + 1]))
        .collect();
    (ids, targets)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Segment {
    Bev = 0,
    Text = 1,
    Query = 2,
}

#[derive(Clone, Debug)]
pub struct Block {
    pub attn: MultiHeadAttention,
    pub ff: Mlp,
}

/// Outputs of one causal pass.
#[derive(Clone, Copy, Debug)]
pub struct CoreOutputs {
    /// `[text_len, V]`.
    pub logits: Var,
    /// Enriched world queries `[Δt·n, C_llm]`, absent when no queries were fed.
    pub queries: Option<Var>,
    /// LLM-processed BEV states `[L, C_llm]`.
    pub bev: Var,
    /// Pooled text `[k, C_llm]`.
    pub pooled_text: Var,
}

#[derive(Clone, Debug)]
pub struct LanguageCore {
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub seg_emb: ParamId,
    pub blocks: Vec<Block>,
    pub lm_head: Linear,
    pub text_pool: Linear,
    pub d: usize,
    pub context: usize,
    pub pooled: usize,
}

impl LanguageCore {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, vocab: usize, rng: &mut R) -> Self {
        let d = cfg.llm_dim;
        let blocks = (0..cfg.llm_layers)
            .map(|i| Block {
                attn: MultiHeadAttention::new(
                    store,
                    &format!("lm.block{i}.attn"),
                    d,
                    d,
                    cfg.llm_heads,
                    Init::Default,
                    Init::Default,
                    rng,
                ),
                ff: Mlp::new(store, &format!("lm.block{i}.ff"), &[d, 4 * d, d], Activation::Silu, Init::Default, rng),
            })
            .collect();
        Self {
            tok_emb: store.add("lm.tok_emb", Tensor::randn(&[vocab, d], 0.5, rng)),
            pos_emb: store.add("lm.pos_emb", Tensor::randn(&[cfg.context, d], 0.1, rng)),
            seg_emb: store.add("lm.seg_emb", Tensor::randn(&[3, d], 0.1, rng)),
            blocks,
            lm_head: Linear::new(store, "lm.head", d, vocab, true, Init::Default, rng),
            text_pool: Linear::new(store, "lm.text_pool", d, d, true, Init::Default, rng),
            d,
            context: cfg.context,
            pooled: cfg.pooled_text,
        }
    }

    fn embed(&self, g: &mut Graph, store: &ParamStore, bev: Var, text: &[usize], queries: Option<Var>) -> Result<(Var, usize, usize, usize)> {
        let l_bev = g.shape(bev)[0];
        let l_q = queries.map_or(0, |q| g.shape(q)[0]);
        let total = l_bev + text.len() + l_q;
        if total > self.context {
            return Err(Error::SequenceTooLong { len: total, max: self.context });
        }
        let table = g.param(store, self.tok_emb);
        let t = g.gather_rows(table, text);
        let mut parts = vec![bev, t];
        parts.extend(queries);
        let x = g.concat_rows(&parts);
        let pos_table = g.param(store, self.pos_emb);
        let positions: Vec<usize> = (0..total).collect();
        let pos = g.gather_rows(pos_table, &positions);
        let seg_table = g.param(store, self.seg_emb);
        let segs: Vec<usize> = std::iter::repeat_n(Segment::Bev as usize, l_bev)
            .chain(std::iter::repeat_n(Segment::Text as usize, text.len()))
            .chain(std::iter::repeat_n(Segment::Query as usize, l_q))
            .collect();
        let seg = g.gather_rows(seg_table, &segs);
        let x = g.add(x, pos);
        Ok((g.add(x, seg), l_bev, text.len(), l_q))
    }

    /// Final-layer states before the output normalization.
    pub fn states(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let n = g.shape(x)[0];
        let mask = causal_mask(n);
        let mut h = x;
        for b in &self.blocks {
            let a_in = g.layer_norm(h);
            let a = b.attn.forward(g, store, a_in, a_in, Some(mask.clone()));
            h = g.add(h, a);
            let f_in = g.layer_norm(h);
            let f = b.ff.forward(g, store, f_in);
            h = g.add(h, f);
        }
        h
    }

    /// Runs the causal stack over `bev` (`[L, C_llm]`), `text` ids and optional
    /// projected world queries.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        bev: Var,
        text: &[usize],
        queries: Option<Var>,
    ) -> Result<CoreOutputs> {
        if text.is_empty() {
            return Err(Error::InvalidArgument("text segment must not be empty".into()));
        }
        let (x, l_bev, l_text, l_q) = self.embed(g, store, bev, text, queries)?;
        let h = self.states(g, store, x);
        let bev_states = g.slice_rows(h, 0, l_bev);
        let text_states = g.slice_rows(h, l_bev, l_bev + l_text);
        let q_states = (l_q > 0).then(|| g.slice_rows(h, l_bev + l_text, l_bev + l_text + l_q));
        let normed = g.layer_norm(text_states);
        let logits = self.lm_head.forward(g, store, normed);
        let pooled = g.sparse_rows(text_states, Rc::new(chunk_mean_taps(l_text, self.pooled)));
        let pooled_text = self.text_pool.forward(g, store, pooled);
        Ok(CoreOutputs {
            logits,
            queries: q_states,
            bev: bev_states,
            pooled_text,
        })
    }

    /// Greedy decoding after `[bos] instruction [sep]`. Ties go to the lowest
    /// id; output always ends with EOS, appended when `max_new` runs out.
    pub fn decode_greedy(
        &self,
        store: &ParamStore,
        bev: &Tensor,
        prompt: &[usize],
        max_new: usize,
    ) -> Result<Vec<usize>> {
        let mut text = prompt.to_vec();
        let mut out = Vec::new();
        for _ in 0..max_new {
            let mut g = Graph::new();
            let b = g.constant(bev.clone());
            let o = self.forward(&mut g, store, b, &text, None)?;
            let logits = g.value(o.logits);
            let next = argmax(logits.row(text.len() - 1));
            out.push(next);
            if next == EOS {
                return Ok(out);
            }
            text.push(next);
        }
        out.push(EOS);
        Ok(out)
    }
}

/// Lowest index among maximal entries.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Mean over `k` contiguous chunks of `n` rows (chunks overlap when `n < k`).
pub fn chunk_mean_taps(n: usize, k: usize) -> crate::autograd::SparseTaps {
    let mut taps = crate::autograd::SparseTaps::new();
    for c in 0..k {
        let s = (c * n) / k;
        let e = (((c + 1) * n).div_ceil(k)).max(s + 1).min(n);
        for r in s..e {
            taps.push(r, 1.0 / (e - s) as f64);
        }
        taps.finish_row();
    }
    taps
}

/// Mean NLL of the supervised next-token targets.
pub fn language_loss(g: &mut Graph, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
    if targets.iter().all(Option::is_none) {
        return Err(Error::Empty("language loss has no supervised positions".into()));
    }
    let (rows, vocab) = (g.value(logits).rows(), g.value(logits).cols());
    if targets.len() != rows {
        return Err(Error::Shape(format!("{} targets for {rows} logit rows", targets.len())));
    }
    if let Some(t) = targets.iter().flatten().find(|&&t| t >= vocab) {
        return Err(Error::InvalidArgument(format!("target id {t} outside vocabulary of {vocab}")));
    }
    Ok(g.cross_entropy(logits, targets))
}

/// Adaptive pooling bins `(rows, cols)` with `rows·cols = n`.
fn bin_layout(n: usize) -> (usize, usize) {
    let mut a = (n as f64).sqrt() as usize;
    while a > 1 && n % a != 0 {
        a -= 1;
    }
    (a.max(1), n / a.max(1))
}

/// Row groups of an `h × w` grid split into `n` adaptive bins.
pub fn adaptive_bins(h: usize, w: usize, n: usize) -> Vec<Vec<usize>> {
    let (bh, bw) = bin_layout(n);
    let range = |i: usize, bins: usize, len: usize| (i * len) / bins..((i + 1) * len).div_ceil(bins);
    let mut groups = Vec::with_capacity(n);
    for bi in 0..bh {
        for bj in 0..bw {
            let mut grp = Vec::new();
            for r in range(bi, bh, h) {
                for c in range(bj, bw, w) {
                    grp.push(r * w + c);
                }
            }
            groups.push(grp);
        }
    }
    groups
}

/// `[dx, dy, dyaw, i/Δt]` per motion.
pub fn motion_features(motions: &[EgoMotion], horizon: usize) -> Tensor {
    let rows: Vec<f64> = motions
        .iter()
        .flat_map(|m| {
            [
                m.delta_position[0],
                m.delta_position[1],
                m.delta_yaw,
                m.horizon_index as f64 / horizon as f64,
            ]
        })
        .collect();
    Tensor::from_vec(&[motions.len(), 4], rows)
}

/// Plain-value world queries for inspection.
#[derive(Clone, Debug, PartialEq)]
pub struct WorldQueries {
    /// `[n, 4c]` pooled base queries.
    pub base: Tensor,
    /// `[Δt, 4c]` ego-motion embeddings.
    pub ego_embeds: Tensor,
    /// `[Δt, 4c]` frame embeddings.
    pub frame_embeds: Tensor,
    /// `[Δt·n, C_llm]` projected queries.
    pub projected: Tensor,
    /// `[Δt·n, C_llm]` enriched queries once the causal pass has run.
    pub enriched: Option<Tensor>,
}

#[derive(Clone, Debug)]
pub struct WorldQueryBuilder {
    pub init: QueryInit,
    pub n: usize,
    pub horizon: usize,
    pub dt_seconds: f64,
    pub ego: Mlp,
    pub frame_emb: ParamId,
    pub phi: Linear,
    /// Learned pooling queries (attention init) or the queries themselves (random init).
    pub learned: Option<ParamId>,
}

/// Graph handles for one world-query build.
#[derive(Clone, Copy, Debug)]
pub struct QueryParts {
    pub base: Var,
    pub ego: Var,
    pub frame: Var,
    /// `[Δt·n, 4c]` before projection.
    pub combined: Var,
    pub projected: Var,
}

impl WorldQueryBuilder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, dt_seconds: f64, rng: &mut R) -> Self {
        let c4 = 4 * cfg.bev_c;
        let learned = match cfg.query_init {
            QueryInit::AttentionPool | QueryInit::Random => {
                Some(store.add("wq.learned", Tensor::randn(&[cfg.queries_per_step, c4], 0.5, rng)))
            }
            _ => None,
        };
        Self {
            init: cfg.query_init,
            n: cfg.queries_per_step,
            horizon: cfg.horizon,
            dt_seconds,
            ego: Mlp::new(store, "wq.ego", &[4, c4, c4], Activation::Silu, Init::Default, rng),
            frame_emb: store.add("wq.frame_emb", Tensor::randn(&[cfg.horizon, c4], 0.1, rng)),
            phi: Linear::new(store, "wq.phi", c4, cfg.llm_dim, true, Init::Default, rng),
            learned,
        }
    }

    pub fn motion_features(&self, motions: &[EgoMotion]) -> Tensor {
        motion_features(motions, self.horizon)
    }

    fn pool(&self, g: &mut Graph, store: &ParamStore, comp_rows: Var, w4: usize) -> Var {
        let c4 = g.shape(comp_rows)[1];
        match self.init {
            QueryInit::MaxPool => g.max_pool_groups(comp_rows, &adaptive_bins(w4, w4, self.n)),
            QueryInit::MeanPool => {
                let mut taps = crate::autograd::SparseTaps::new();
                for grp in adaptive_bins(w4, w4, self.n) {
                    for &r in &grp {
                        taps.push(r, 1.0 / grp.len() as f64);
                    }
                    taps.finish_row();
                }
                g.sparse_rows(comp_rows, Rc::new(taps))
            }
            QueryInit::AttentionPool => {
                let q = g.param(store, self.learned.expect("attention pool parameters"));
                let s = g.matmul_nt(q, comp_rows);
                let s = g.scale(s, 1.0 / (c4 as f64).sqrt());
                let p = g.softmax(s, None);
                g.matmul(p, comp_rows)
            }
            QueryInit::Random => g.param(store, self.learned.expect("random query parameters")),
        }
    }

    /// `Q^w = φ((Q ⊕ e_{t+i}) ⊕ FE_i)` for `i = 1..Δt`, group-major rows.
    pub fn build(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        comp_rows: Var,
        w4: usize,
        motions: &[EgoMotion],
    ) -> Result<QueryParts> {
        if motions.len() != self.horizon {
            return Err(Error::InvalidArgument(format!(
                "{} ego motions for a horizon of {}",
                motions.len(),
                self.horizon
            )));
        }
        if !motions.iter().all(EgoMotion::is_finite) {
            return Err(Error::NonFinite("ego motion".into()));
        }
        let base = self.pool(g, store, comp_rows, w4);
        let m = g.constant(self.motion_features(motions));
        let ego = self.ego.forward(g, store, m);
        let frame = g.param(store, self.frame_emb);
        let cond = g.add(ego, frame);
        let groups: Vec<Var> = (0..self.horizon)
            .map(|i| {
                let row = g.slice_rows(cond, i, i + 1);
                g.add_row(base, row)
            })
            .collect();
        let combined = g.concat_rows(&groups);
        let projected = self.phi.forward(g, store, combined);
        Ok(QueryParts {
            base,
            ego,
            frame,
            combined,
            projected,
        })
    }
}
