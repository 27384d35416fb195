//! Parameterized layers built on the autograd graph.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::params::{init, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let w = store.add(format!("{name}.weight"), init::xavier(rng, fan_in, fan_out));
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
        Self { w, b: Some(b) }
    }

    /// A layer whose weights and bias start at zero (identity-preserving heads).
    pub fn zeros(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let w = store.add(format!("{name}.weight"), Tensor::zeros(&[fan_in, fan_out]));
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
        Self { w, b: Some(b) }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = self.b.map(|b| g.param(store, b));
        g.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[width], 1.0));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[width]));
        Self { gamma, beta }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

/// Multi-head scaled dot-product attention with input and output projections.
#[derive(Clone, Debug)]
pub struct Attention {
    pub heads: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl Attention {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, dim: usize, heads: usize) -> Self {
        assert_eq!(dim % heads, 0, "heads must divide width");
        Self {
            heads,
            q: Linear::new(store, rng, &format!("{name}.q"), dim, dim),
            k: Linear::new(store, rng, &format!("{name}.k"), dim, dim),
            v: Linear::new(store, rng, &format!("{name}.v"), dim, dim),
            o: Linear::new(store, rng, &format!("{name}.o"), dim, dim),
        }
    }

    fn split_heads(&self, g: &mut Graph, x: Var) -> Var {
        let (n, c) = (g.shape(x)[0], g.shape(x)[1]);
        let r = g.reshape(x, &[n, self.heads, c / self.heads]);
        g.permute3(r, [1, 0, 2])
    }

    /// Attends from `query` rows `[N, C]` to `memory` rows `[M, C]`. `bias`,
    /// when given, is added to the `[H, N, M]` logits before the softmax.
    /// Returns the projected output `[N, C]` and the attention weights.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, query: Var, memory: Var, bias: Option<Var>) -> (Var, Var) {
        let (n, c) = (g.shape(query)[0], g.shape(query)[1]);
        let dh = c / self.heads;
        let q = self.q.forward(g, store, query);
        let k = self.k.forward(g, store, memory);
        let v = self.v.forward(g, store, memory);
        let (q, k, v) = (self.split_heads(g, q), self.split_heads(g, k), self.split_heads(g, v));
        let logits = g.matmul_t(q, k, false, true);
        let mut logits = g.scale(logits, 1.0 / (dh as f64).sqrt());
        if let Some(b) = bias {
            logits = g.add(logits, b);
        }
        let weights = g.softmax(logits);
        let ctx = g.matmul(weights, v);
        let ctx = g.permute3(ctx, [1, 0, 2]);
        let ctx = g.reshape(ctx, &[n, c]);
        (self.o.forward(g, store, ctx), weights)
    }
}

/// `Linear -> LayerNorm -> ReLU` followed by an output linear layer.
#[derive(Clone, Debug)]
pub struct Branch {
    pub hidden: Linear,
    pub norm: LayerNorm,
    pub out: Linear,
}

impl Branch {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, dim: usize, out: Linear) -> Self {
        Self {
            hidden: Linear::new(store, rng, &format!("{name}.hidden"), dim, dim),
            norm: LayerNorm::new(store, &format!("{name}.norm"), dim),
            out,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let h = self.hidden.forward(g, store, x);
        let h = self.norm.forward(g, store, h);
        let h = g.relu(h);
        self.out.forward(g, store, h)
    }
}
