//! Adaptive propagation gate: a small binary classifier on the feature
//! residual between the current frame and the last key frame.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::detector::FeatureMap;
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::{init, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const POOL: usize = 4;

#[derive(Clone, Debug)]
pub struct GateUnit {
    pub conv_w: ParamId,
    pub conv_b: ParamId,
    pub proj: Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateDecision {
    NewKey,
    Propagate,
}

impl GateUnit {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, feat_channels: usize, conv_channels: usize) -> Self {
        let conv_w = store.add("gate.conv.weight", init::kaiming(rng, &[conv_channels, feat_channels, 3, 3]));
        let conv_b = store.add("gate.conv.bias", Tensor::zeros(&[conv_channels]));
        let proj = Linear::new(store, rng, "gate.proj", conv_channels * POOL * POOL, 1);
        Self { conv_w, conv_b, proj }
    }

    /// Gate logit `[1, 1]` from two feature maps already on the graph.
    pub fn logit(&self, g: &mut Graph, store: &ParamStore, x_key: Var, x_t: Var) -> Var {
        let r = g.sub(x_t, x_key);
        let (w, b) = (g.param(store, self.conv_w), g.param(store, self.conv_b));
        let h = g.conv2d(r, w, Some(b), 1, 1);
        let h = g.relu(h);
        let h = g.adaptive_avg_pool(h, POOL, POOL);
        let n = g.value(h).len();
        let h = g.reshape(h, &[1, n]);
        self.proj.forward(g, store, h)
    }

    /// Probability that `x_t` should become a new key frame.
    pub fn gate_forward(&self, store: &ParamStore, x_key: &FeatureMap, x_t: &FeatureMap) -> Result<f64> {
        if x_key.data.shape() != x_t.data.shape() {
            return Err(Error::Shape(format!("gate inputs {:?} vs {:?}", x_key.data.shape(), x_t.data.shape())));
        }
        let mut g = Graph::inference();
        let (a, b) = (g.constant(x_key.data.clone()), g.constant(x_t.data.clone()));
        let l = self.logit(&mut g, store, a, b);
        Ok(crate::autograd::sigmoid(g.value(l).item()))
    }
}

/// `NewKey` iff `p > threshold`.
pub fn gate_decide(p: f64, threshold: f64) -> GateDecision {
    if p > threshold {
        GateDecision::NewKey
    } else {
        GateDecision::Propagate
    }
}

/// Label 1 for every candidate whose loss exceeds `beta * min(losses)`.
pub fn pseudo_labels(losses: &[f64], beta: f64) -> Vec<f64> {
    let min = losses.iter().cloned().fold(f64::INFINITY, f64::min);
    let eps = beta * min;
    losses.iter().map(|&l| if l > eps { 1.0 } else { 0.0 }).collect()
}

/// Mean binary cross-entropy from gate logits.
pub fn gate_loss(g: &mut Graph, logits: Var, labels: &[f64]) -> Var {
    let n = labels.len();
    g.bce_with_logits(logits, &Tensor::new(&[n], labels.to_vec()))
}

/// Mean binary cross-entropy from probabilities (reference form).
pub fn bce_from_probs(probs: &[f64], labels: &[f64]) -> f64 {
    let s: f64 = probs.iter().zip(labels).map(|(&p, &y)| -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())).sum();
    s / probs.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::check::{check_inputs, check_params, DEFAULT_EPS};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit() -> (ParamStore, GateUnit) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let gate = GateUnit::new(&mut store, &mut rng, 3, 2);
        (store, gate)
    }

    fn fm(t: Tensor) -> FeatureMap {
        FeatureMap { data: t, stride: 8 }
    }

    #[test]
    fn zero_residual_gives_bias_path() {
        let (mut store, gate) = unit();
        store.set(gate.proj.b.unwrap(), Tensor::new(&[1], vec![0.7]));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = init::normal(&mut rng, &[3, 6, 6], 1.0);
        let p = gate.gate_forward(&store, &fm(x.clone()), &fm(x)).unwrap();
        // conv bias is zero, so the pooled features vanish after the ReLU
        assert!((p - crate::autograd::sigmoid(0.7)).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let (store, gate) = unit();
        assert!(gate.gate_forward(&store, &fm(Tensor::zeros(&[3, 4, 4])), &fm(Tensor::zeros(&[3, 5, 4]))).is_err());
    }

    #[test]
    fn decision_uses_strict_threshold() {
        assert_eq!(gate_decide(0.7, 0.5), GateDecision::NewKey);
        assert_eq!(gate_decide(0.5, 0.5), GateDecision::Propagate);
        assert_eq!(gate_decide(0.999_999, 1.0), GateDecision::Propagate);
    }

    #[test]
    fn pseudo_label_examples() {
        assert_eq!(pseudo_labels(&[0.2, 0.3, 0.5], 1.5), vec![0.0, 0.0, 1.0]);
        assert_eq!(pseudo_labels(&[0.4, 0.2, 0.2, 0.3], 1.0), vec![1.0, 0.0, 0.0, 1.0]);
        assert_eq!(pseudo_labels(&[0.3; 4], 2.0), vec![0.0; 4]);
    }

    #[test]
    fn bce_closed_forms() {
        assert!((bce_from_probs(&[0.5, 0.5], &[0.0, 1.0]) - std::f64::consts::LN_2).abs() < 1e-12);
        let mut g = Graph::inference();
        let l = g.constant(Tensor::new(&[2], vec![0.0, 0.0]));
        let v = gate_loss(&mut g, l, &[0.0, 1.0]);
        assert!((g.value(v).item() - std::f64::consts::LN_2).abs() < 1e-12);
        let l = g.constant(Tensor::new(&[2], vec![-40.0, 40.0]));
        let v = gate_loss(&mut g, l, &[0.0, 1.0]);
        assert!(g.value(v).item() < 1e-15);
    }

    #[test]
    fn gate_gradients() {
        let (store, gate) = unit();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = init::normal(&mut rng, &[3, 5, 6], 1.0);
        let b = init::normal(&mut rng, &[3, 5, 6], 1.0);
        let err = check_inputs(
            &[a.clone(), b.clone()],
            |g, v| {
                let l = gate.logit(g, &store, v[0], v[1]);
                g.sigmoid(l)
            },
            DEFAULT_EPS,
        );
        assert!(err < 1e-4, "err={err}");
        let ids: Vec<_> = store.ids().collect();
        let err = check_params(
            &store,
            &ids,
            |g, s| {
                let (x, y) = (g.constant(a.clone()), g.constant(b.clone()));
                let l = gate.logit(g, s, x, y);
                gate_loss(g, l, &[1.0])
            },
            DEFAULT_EPS,
            None,
        );
        assert!(err < 1e-4, "err={err}");
    }

    #[test]
    fn residual_cancels_common_offset() {
        let (store, gate) = unit();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // dyadic values keep the sums exact
        let q = |t: Tensor| t.map(|v| (v * 1024.0).round() / 1024.0);
        let x = q(init::normal(&mut rng, &[3, 4, 4], 1.0));
        let y = q(init::normal(&mut rng, &[3, 4, 4], 1.0));
        let d = q(init::normal(&mut rng, &[3, 4, 4], 8.0));
        let add = |a: &Tensor, b: &Tensor| Tensor::new(a.shape(), a.data().iter().zip(b.data()).map(|(p, q)| p + q).collect());
        let p0 = gate.gate_forward(&store, &fm(x.clone()), &fm(y.clone())).unwrap();
        let p1 = gate.gate_forward(&store, &fm(add(&x, &d)), &fm(add(&y, &d))).unwrap();
        assert_eq!(p0, p1);
    }

    proptest! {
        #[test]
        fn labels_are_scale_invariant(losses in prop::collection::vec(0.0f64..10.0, 1..12), beta in 1.0f64..3.0, c in 0.01f64..100.0) {
            let scaled: Vec<f64> = losses.iter().map(|l| l * c).collect();
            let a = pseudo_labels(&losses, beta);
            let b = pseudo_labels(&scaled, beta);
            // scaling can only flip a label when l == beta * min up to rounding
            let min = losses.iter().cloned().fold(f64::INFINITY, f64::min);
            for i in 0..losses.len() {
                if (losses[i] - beta * min).abs() > 1e-9 * (1.0 + losses[i]) {
                    prop_assert_eq!(a[i], b[i]);
                }
            }
            prop_assert!(a.iter().any(|&y| y == 0.0));
        }

        #[test]
        fn probability_in_open_interval(seed in any::<u64>()) {
            let (store, gate) = unit();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = init::normal(&mut rng, &[3, 4, 4], 3.0);
            let b = init::normal(&mut rng, &[3, 4, 4], 3.0);
            let p = gate.gate_forward(&store, &fm(a), &fm(b)).unwrap();
            prop_assert!(p > 0.0 && p < 1.0);
        }
    }
}
