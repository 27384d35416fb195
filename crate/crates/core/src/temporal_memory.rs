//! Temporal query enhancement: short- and long-term key-frame memories and
//! the relation modules that fold them into the current key frame's queries.

use std::collections::VecDeque;

use rand::seq::index::sample;
use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::config::{MemoryConfig, QueryBoxSource, RelationConfig};
use crate::detector::{Detector, ScoreSet};
use crate::nn::{Attention, Linear};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Queries and boxes of one key frame, sorted by score (descending).
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryEntry {
    pub queries: Tensor,
    pub boxes: Tensor,
    pub scores: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LongEntry {
    pub query: Vec<f64>,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryStore {
    pub short: VecDeque<MemoryEntry>,
    pub long_pool: VecDeque<LongEntry>,
    pub m: usize,
    pub l: usize,
    pub t: usize,
    pub pool_cap: usize,
    pub key_frames: usize,
}

/// Stable argsort, largest first.
pub fn argsort_desc(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

impl MemoryStore {
    pub fn new(cfg: &MemoryConfig) -> Self {
        Self {
            short: VecDeque::new(),
            long_pool: VecDeque::new(),
            m: cfg.short_frames,
            l: cfg.top_per_frame,
            t: cfg.long_samples,
            pool_cap: cfg.pool_cap,
            key_frames: 0,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.short.is_empty() && self.long_pool.is_empty()
    }

    /// Sorts `q6` and `b_k` by the best class probability of `c_k` and pushes
    /// them; an evicted frame leaves its top-`l` queries in the long pool.
    pub fn update(&mut self, q6: &Tensor, c_k: &ScoreSet, b_k: &Tensor) {
        self.key_frames += 1;
        let scores: Vec<f64> = c_k.best().into_iter().map(|(_, p)| p).collect();
        let order = argsort_desc(&scores);
        self.short.push_back(MemoryEntry {
            queries: q6.gather_rows(&order),
            boxes: b_k.gather_rows(&order),
            scores: order.iter().map(|&i| scores[i]).collect(),
        });
        while self.short.len() > self.m {
            let old = self.short.pop_front().expect("nonempty");
            for i in 0..self.l.min(old.scores.len()) {
                self.long_pool.push_back(LongEntry { query: old.queries.row(i).to_vec(), score: old.scores[i] });
            }
            while self.long_pool.len() > self.pool_cap {
                self.long_pool.pop_front();
            }
        }
    }

    /// `{S_q, S_b}` concatenated over the short-term frames.
    pub fn short_term(&self) -> Option<(Tensor, Tensor)> {
        if self.short.is_empty() {
            return None;
        }
        let q: Vec<&Tensor> = self.short.iter().map(|e| &e.queries).collect();
        let b: Vec<&Tensor> = self.short.iter().map(|e| &e.boxes).collect();
        Some((Tensor::concat_rows(&q), Tensor::concat_rows(&b)))
    }

    /// Uniform sample of `T` long-pool queries without replacement, in pool order.
    pub fn sample_long_term(&self, rng: &mut impl Rng) -> Option<Tensor> {
        if self.long_pool.is_empty() || self.t == 0 {
            return None;
        }
        let idx: Vec<usize> = if self.long_pool.len() <= self.t {
            (0..self.long_pool.len()).collect()
        } else {
            let mut v = sample(rng, self.long_pool.len(), self.t).into_vec();
            v.sort_unstable();
            v
        };
        let rows: Vec<Vec<f64>> = idx.iter().map(|&i| self.long_pool[i].query.clone()).collect();
        Some(Tensor::from_rows(&rows, rows[0].len()))
    }

    pub fn inputs(&self, rng: &mut impl Rng) -> MemoryInputs {
        MemoryInputs { short: self.short_term(), long: self.sample_long_term(rng) }
    }
}

/// Memory contents presented to the TQE head for one key frame.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MemoryInputs {
    /// `(S_q, S_b)`.
    pub short: Option<(Tensor, Tensor)>,
    /// `L_q`.
    pub long: Option<Tensor>,
}

impl MemoryInputs {
    pub fn is_empty(&self) -> bool {
        self.short.is_none() && self.long.is_none()
    }
}

/// Pairwise relative-box features `(log|dx|/w, log|dy|/h, log w'/w, log h'/h)`
/// for every (query, memory) pair, row-major `[N*M, 4]`.
pub fn relative_geometry(q_boxes: &Tensor, m_boxes: &Tensor) -> Tensor {
    let (n, m) = (q_boxes.rows(), m_boxes.rows());
    let mut out = Vec::with_capacity(n * m * 4);
    for i in 0..n {
        let a = q_boxes.row(i);
        for j in 0..m {
            let b = m_boxes.row(j);
            out.push(((a[0] - b[0]).abs() / a[2]).max(1e-3).ln());
            out.push(((a[1] - b[1]).abs() / a[3]).max(1e-3).ln());
            out.push((b[2] / a[2]).ln());
            out.push((b[3] / a[3]).ln());
        }
    }
    Tensor::new(&[n * m, 4], out)
}

/// Sinusoidal embedding of `[P, 4]` geometry into `[P, dim]`.
pub fn embed_geometry(geo: &Tensor, dim: usize) -> Tensor {
    let freqs = dim / 8;
    let p = geo.rows();
    let mut out = Vec::with_capacity(p * dim);
    for r in 0..p {
        for &x in geo.row(r) {
            for k in 0..freqs {
                let wave = 1000f64.powf(k as f64 / freqs as f64);
                let arg = 100.0 * x / wave;
                out.push(arg.sin());
                out.push(arg.cos());
            }
        }
    }
    Tensor::new(&[p, dim], out)
}

/// Long and short relation modules.
#[derive(Clone, Debug)]
pub struct RelationHead {
    pub long: Attention,
    pub short: Attention,
    pub geo: Linear,
    pub geo_dim: usize,
    pub use_geometry: bool,
}

impl RelationHead {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, dim: usize, cfg: &RelationConfig) -> Self {
        Self {
            long: Attention::new(store, rng, "tqe.long", dim, cfg.heads),
            short: Attention::new(store, rng, "tqe.short", dim, cfg.heads),
            geo: Linear::new(store, rng, "tqe.geo", cfg.geo_dim, cfg.heads),
            geo_dim: cfg.geo_dim,
            use_geometry: cfg.use_geometry,
        }
    }

    /// `q + Attn(q, L_q)` on appearance only; identity for an empty pool.
    pub fn long_relation(&self, g: &mut Graph, store: &ParamStore, q: Var, pool: Option<Var>) -> Var {
        match pool {
            None => q,
            Some(l) => {
                let (a, _) = self.long.forward(g, store, q, l, None);
                g.add(q, a)
            }
        }
    }

    /// Per-head geometric logit bias `[H, N, M]`, clipped at zero from below.
    pub fn geometry_bias(&self, g: &mut Graph, store: &ParamStore, q_boxes: &Tensor, m_boxes: &Tensor) -> Var {
        let (n, m) = (q_boxes.rows(), m_boxes.rows());
        let e = g.constant(embed_geometry(&relative_geometry(q_boxes, m_boxes), self.geo_dim));
        let w = self.geo.forward(g, store, e);
        let w = g.relu(w);
        let w = g.reshape(w, &[n, m, self.short.heads]);
        g.permute3(w, [2, 0, 1])
    }

    /// `q + Attn(q, S_q^l; geometry)`; identity for an empty short memory.
    /// Returns the output and, when memory is present, the attention weights.
    pub fn short_relation(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        q: Var,
        q_boxes: &Tensor,
        mem: Option<(Var, &Tensor)>,
    ) -> (Var, Option<Var>) {
        let Some((sq, sb)) = mem else { return (q, None) };
        let bias = self.use_geometry.then(|| self.geometry_bias(g, store, q_boxes, sb));
        let (a, w) = self.short.forward(g, store, q, sq, bias);
        (g.add(q, a), Some(w))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TqeOutput {
    /// `q_{k,6}`: the last dynamic update before enhancement.
    pub q6: Var,
    /// `q_k^e`.
    pub enhanced: Var,
    pub logits: Var,
    pub boxes: Var,
}

/// Runs the final key stage as the TQE head: dynamic update of `(q5, b5)`,
/// long/short relations against `mem`, then that stage's Cls&Reg.
#[allow(clippy::too_many_arguments)]
pub fn tqe_head(
    g: &mut Graph,
    store: &ParamStore,
    det: &Detector,
    rel: &RelationHead,
    box_source: QueryBoxSource,
    fm: Var,
    q5: Var,
    b5: &Tensor,
    mem: &MemoryInputs,
) -> TqeOutput {
    let stage = det.stages.last().expect("detector has stages");
    let q6 = stage.update(g, store, fm, q5, b5, &det.roi);
    let base = g.constant(b5.clone());
    if mem.is_empty() {
        let (logits, boxes) = stage.predict(g, store, q6, base);
        return TqeOutput { q6, enhanced: q6, logits, boxes };
    }
    let pool = mem.long.as_ref().map(|l| g.constant(l.clone()));
    let ql = rel.long_relation(g, store, q6, pool);
    let enhanced = match &mem.short {
        None => ql,
        Some((sq, sb)) => {
            let sq = g.constant(sq.clone());
            let sql = rel.long_relation(g, store, sq, pool);
            let q_boxes = match box_source {
                QueryBoxSource::Stage5 => b5.clone(),
                QueryBoxSource::Stage6 => {
                    let deltas = stage.reg.forward(g, store, q6);
                    let b = g.apply_deltas(deltas, base, crate::autograd::BoxCoder::default());
                    g.tensor(b)
                }
            };
            rel.short_relation(g, store, ql, &q_boxes, Some((sql, sb))).0
        }
    };
    let (logits, boxes) = stage.predict(g, store, enhanced, base);
    TqeOutput { q6, enhanced, logits, boxes }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::check::{check_inputs, check_params, DEFAULT_EPS};
    use crate::config::Config;
    use crate::params::init;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mem_cfg(m: usize, l: usize, t: usize) -> MemoryConfig {
        MemoryConfig { short_frames: m, top_per_frame: l, long_samples: t, ..MemoryConfig::default() }
    }

    fn frame(rng: &mut ChaCha8Rng, n: usize) -> (Tensor, ScoreSet, Tensor) {
        let q = init::normal(rng, &[n, 4], 1.0);
        let s = ScoreSet(init::uniform(rng, &[n, 2], 0.5).map(|v| v + 0.5));
        let b = Tensor::new(&[n, 4], [0.5, 0.5, 0.2, 0.2].repeat(n));
        (q, s, b)
    }

    #[test]
    fn argsort_orders_by_score() {
        assert_eq!(argsort_desc(&[0.1, 0.9, 0.5]), vec![1, 2, 0]);
    }

    #[test]
    fn eviction_arithmetic() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut mem = MemoryStore::new(&mem_cfg(3, 2, 5));
        let (q, s, b) = frame(&mut rng, 4);
        mem.update(&q, &s, &b);
        assert_eq!((mem.short.len(), mem.long_pool.len()), (1, 0));
        for _ in 0..3 {
            let (q, s, b) = frame(&mut rng, 4);
            mem.update(&q, &s, &b);
        }
        assert_eq!((mem.short.len(), mem.long_pool.len()), (3, 2));
    }

    #[test]
    fn update_sorts_queries_with_boxes() {
        let mut mem = MemoryStore::new(&mem_cfg(2, 1, 5));
        let q = Tensor::new(&[3, 1], vec![0.0, 1.0, 2.0]);
        let b = Tensor::new(&[3, 4], vec![0.1, 0.1, 0.1, 0.1, 0.2, 0.2, 0.2, 0.2, 0.3, 0.3, 0.3, 0.3]);
        let s = ScoreSet(Tensor::new(&[3, 1], vec![0.1, 0.9, 0.5]));
        mem.update(&q, &s, &b);
        let e = &mem.short[0];
        assert_eq!(e.queries.data(), &[1.0, 2.0, 0.0]);
        assert_eq!(e.boxes.row(0), &[0.2; 4]);
        assert_eq!(e.scores, vec![0.9, 0.5, 0.1]);
    }

    #[test]
    fn long_sampling_clamps_and_is_deterministic() {
        let mut mem = MemoryStore::new(&mem_cfg(1, 1, 500));
        for i in 0..300 {
            mem.long_pool.push_back(LongEntry { query: vec![i as f64], score: 0.5 });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(mem.sample_long_term(&mut rng).unwrap().rows(), 300);
        for i in 300..1000 {
            mem.long_pool.push_back(LongEntry { query: vec![i as f64], score: 0.5 });
        }
        let a = mem.sample_long_term(&mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let b = mem.sample_long_term(&mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(a, b);
        let mut vals: Vec<i64> = a.data().iter().map(|&v| v as i64).collect();
        vals.dedup();
        assert_eq!(vals.len(), 500);
    }

    #[test]
    fn memory_bounds_hold_over_long_fuzz() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (m, l, cap) in [(4, 10, 5000), (2, 3, 7), (1, 5, 12)] {
            let mut mem = MemoryStore::new(&MemoryConfig { pool_cap: cap, ..mem_cfg(m, l, 50) });
            for _ in 0..10_000 {
                let (q, s, b) = frame(&mut rng, 6);
                mem.update(&q, &s, &b);
                assert!(mem.short.len() <= m);
                assert!(mem.long_pool.len() <= l * mem.key_frames.saturating_sub(m));
                assert!(mem.long_pool.len() <= cap);
            }
        }
    }

    fn relation(heads: usize) -> (ParamStore, RelationHead) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = RelationConfig { heads, geo_dim: 8, use_geometry: true };
        let rel = RelationHead::new(&mut store, &mut rng, 4, &cfg);
        (store, rel)
    }

    #[test]
    fn empty_memories_are_identity() {
        let (store, rel) = relation(2);
        let mut g = Graph::inference();
        let q = g.constant(Tensor::new(&[2, 4], (0..8).map(|v| v as f64).collect()));
        assert_eq!(rel.long_relation(&mut g, &store, q, None), q);
        let b = Tensor::new(&[2, 4], [0.5, 0.5, 0.2, 0.2].repeat(2));
        assert_eq!(rel.short_relation(&mut g, &store, q, &b, None).0, q);
    }

    #[test]
    fn single_long_entry_adds_its_projected_value() {
        let (store, rel) = relation(1);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = init::normal(&mut rng, &[3, 4], 1.0);
        let l = init::normal(&mut rng, &[1, 4], 1.0);
        let mut g = Graph::inference();
        let (qv, lv) = (g.constant(q.clone()), g.constant(l.clone()));
        let out = rel.long_relation(&mut g, &store, qv, Some(lv));
        // one key: softmax weight 1, so each row gains W_o (W_v l + b_v) + b_o
        let mv = |x: &[f64], w: &Tensor, b: &Tensor| -> Vec<f64> {
            (0..w.dim(1)).map(|j| b.data()[j] + x.iter().enumerate().map(|(i, xi)| xi * w.data()[i * w.dim(1) + j]).sum::<f64>()).collect()
        };
        let v = mv(l.row(0), store.get(rel.long.v.w), store.get(rel.long.v.b.unwrap()));
        let o = mv(&v, store.get(rel.long.o.w), store.get(rel.long.o.b.unwrap()));
        for i in 0..3 {
            for j in 0..4 {
                let expect = q.row(i)[j] + o[j];
                assert!((g.value(out).row(i)[j] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identical_boxes_give_zero_displacement_encoding() {
        let b = Tensor::new(&[2, 4], vec![0.4, 0.4, 0.2, 0.3, 0.4, 0.4, 0.2, 0.3]);
        let geo = relative_geometry(&b, &b);
        let zero = [(1e-3f64).ln(), (1e-3f64).ln(), 0.0, 0.0];
        for r in 0..4 {
            assert_eq!(geo.row(r), &zero);
        }
    }

    #[test]
    fn short_relation_matches_hand_computation() {
        // one head, 2 queries x 2 memory entries
        let (mut store, rel) = relation(1);
        let eye = Tensor::new(&[4, 4], (0..16).map(|i| if i % 5 == 0 { 1.0 } else { 0.0 }).collect());
        for lin in [&rel.short.q, &rel.short.k, &rel.short.v, &rel.short.o] {
            store.set(lin.w, eye.clone());
        }
        let gw = Tensor::new(&[8, 1], vec![0.5, -0.2, 0.1, 0.3, -0.4, 0.2, 0.05, 0.6]);
        store.set(rel.geo.w, gw.clone());
        let q = Tensor::new(&[2, 4], vec![1.0, 0.0, 0.5, -0.5, 0.2, 0.3, -0.1, 0.0]);
        let sq = Tensor::new(&[2, 4], vec![0.3, -0.2, 0.4, 0.1, -0.5, 0.6, 0.0, 0.2]);
        let qb = Tensor::new(&[2, 4], vec![0.3, 0.3, 0.2, 0.2, 0.6, 0.5, 0.3, 0.2]);
        let sb = Tensor::new(&[2, 4], vec![0.35, 0.3, 0.2, 0.25, 0.7, 0.6, 0.2, 0.2]);
        let mut g = Graph::inference();
        let (qv, sv) = (g.constant(q.clone()), g.constant(sq.clone()));
        let (out, w) = rel.short_relation(&mut g, &store, qv, &qb, Some((sv, &sb)));
        let emb = embed_geometry(&relative_geometry(&qb, &sb), 8);
        for i in 0..2 {
            let logits: Vec<f64> = (0..2)
                .map(|j| {
                    let dot: f64 = q.row(i).iter().zip(sq.row(j)).map(|(a, b)| a * b).sum::<f64>() / 2.0;
                    let geo: f64 = emb.row(i * 2 + j).iter().zip(gw.data()).map(|(e, w)| e * w).sum();
                    dot + geo.max(0.0)
                })
                .collect();
            let mx = logits[0].max(logits[1]);
            let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let a: Vec<f64> = e.iter().map(|v| v / (e[0] + e[1])).collect();
            assert!((g.value(w.unwrap()).row(0)[i * 2] - a[0]).abs() < 1e-12);
            for c in 0..4 {
                let expect = q.row(i)[c] + a[0] * sq.row(0)[c] + a[1] * sq.row(1)[c];
                assert!((g.value(out).row(i)[c] - expect).abs() < 1e-12);
            }
        }
        for row in g.value(w.unwrap()).data().chunks(2) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn relation_gradients() {
        let (store, rel) = relation(2);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let q = init::normal(&mut rng, &[3, 4], 1.0);
        let l = init::normal(&mut rng, &[5, 4], 1.0);
        let sq = init::normal(&mut rng, &[4, 4], 1.0);
        let qb = Tensor::new(&[3, 4], vec![0.3, 0.3, 0.2, 0.2, 0.6, 0.5, 0.3, 0.2, 0.5, 0.5, 0.4, 0.4]);
        let sb = Tensor::new(&[4, 4], vec![0.35, 0.3, 0.2, 0.25, 0.7, 0.6, 0.2, 0.2, 0.1, 0.2, 0.1, 0.1, 0.5, 0.4, 0.3, 0.3]);
        let wt = init::normal(&mut rng, &[3, 4], 1.0);
        let build = |g: &mut Graph, s: &ParamStore, q: Var, l: Var, sq: Var| {
            let ql = rel.long_relation(g, s, q, Some(l));
            let sql = rel.long_relation(g, s, sq, Some(l));
            let (o, _) = rel.short_relation(g, s, ql, &qb, Some((sql, &sb)));
            let w = g.constant(wt.clone());
            let o = g.mul(o, w);
            g.sum(o)
        };
        let err = check_inputs(&[q.clone(), l.clone(), sq.clone()], |g, v| build(g, &store, v[0], v[1], v[2]), DEFAULT_EPS);
        assert!(err < 1e-4, "input err={err}");
        let ids: Vec<_> = store.ids().collect();
        let err = check_params(
            &store,
            &ids,
            |g, s| {
                let (a, b, c) = (g.constant(q.clone()), g.constant(l.clone()), g.constant(sq.clone()));
                build(g, s, a, b, c)
            },
            DEFAULT_EPS,
            Some(6),
        );
        assert!(err < 1e-4, "param err={err}");
    }

    #[test]
    fn empty_memory_tqe_equals_plain_final_stage() {
        let cfg = Config::tiny();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let det = Detector::new(&mut store, &mut rng, &cfg.model, 3, (16, 16));
        let rel = RelationHead::new(&mut store, &mut rng, cfg.model.query_dim, &cfg.relation);
        let image = init::uniform(&mut rng, &[3, 16, 16], 0.5);

        let mut g = Graph::inference();
        let fm = det.features(&mut g, &store, &image).unwrap();
        let plain = det.run_stages(&mut g, &store, fm, 6);

        let mut h = Graph::inference();
        let fm2 = det.features(&mut h, &store, &image).unwrap();
        let five = det.run_stages(&mut h, &store, fm2, 5);
        let b5 = h.tensor(five[4].boxes);
        let out = tqe_head(&mut h, &store, &det, &rel, QueryBoxSource::Stage6, fm2, five[4].queries, &b5, &MemoryInputs::default());
        assert_eq!(h.value(out.logits), g.value(plain[5].logits));
        assert_eq!(h.value(out.boxes), g.value(plain[5].boxes));
        assert_eq!(h.value(out.enhanced), g.value(plain[5].queries));
        assert_eq!(h.interactions(), 6);
    }
}
