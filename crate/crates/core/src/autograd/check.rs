//! Central finite-difference gradient checking.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-6;

/// Largest deviation between two gradients, relative to the infinity norm of
/// the numerical one (floored at `1e-5`, so gradients that vanish analytically are compared
/// against finite-difference round-off in absolute terms).
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let scale = numeric.iter().chain(analytic).fold(0.0f64, |m, v| m.max(v.abs())).max(1e-5);
    analytic.iter().zip(numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max) / scale
}

/// Coordinates to probe: all of them, or a seeded subset of `limit`.
fn probe_indices(len: usize, limit: Option<usize>, seed: u64) -> Vec<usize> {
    match limit {
        Some(l) if l < len => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut v = sample(&mut rng, len, l).into_vec();
            v.sort_unstable();
            v
        }
        _ => (0..len).collect(),
    }
}

/// Checks gradients of a scalar function with respect to free input tensors.
/// Returns the worst relative error over all inputs.
pub fn check_inputs(inputs: &[Tensor], build: impl Fn(&mut Graph, &[Var]) -> Var, eps: f64) -> f64 {
    let eval = |ts: &[Tensor]| {
        let mut g = Graph::inference();
        let vars: Vec<Var> = ts.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars);
        g.value(out).item()
    };
    let mut g = Graph::training();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = build(&mut g, &vars);
    let grads = g.backward(out);
    let mut worst = 0.0f64;
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.leaf(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        let mut numeric = vec![0.0; inputs[k].len()];
        let mut probe = inputs.to_vec();
        for (i, n) in numeric.iter_mut().enumerate() {
            let orig = probe[k].data()[i];
            probe[k].data_mut()[i] = orig + eps;
            let up = eval(&probe);
            probe[k].data_mut()[i] = orig - eps;
            let down = eval(&probe);
            probe[k].data_mut()[i] = orig;
            *n = (up - down) / (2.0 * eps);
        }
        worst = worst.max(relative_error(analytic.data(), &numeric));
    }
    worst
}

/// Checks parameter gradients of `build` for the listed parameters, probing at
/// most `limit` coordinates per parameter tensor.
pub fn check_params(
    store: &ParamStore,
    ids: &[ParamId],
    build: impl Fn(&mut Graph, &ParamStore) -> Var,
    eps: f64,
    limit: Option<usize>,
) -> f64 {
    let mut g = Graph::training();
    let out = build(&mut g, store);
    let grads = g.backward(out);
    let mut probe = store.clone();
    let mut worst = 0.0f64;
    for &id in ids {
        let shape = store.get(id).shape().to_vec();
        let full = grads.param(id).cloned().unwrap_or_else(|| Tensor::zeros(&shape));
        let idx = probe_indices(full.len(), limit, id.index() as u64);
        let mut analytic = Vec::with_capacity(idx.len());
        let mut numeric = Vec::with_capacity(idx.len());
        for &i in &idx {
            let orig = store.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = orig + eps;
            let up = {
                let mut g = Graph::inference();
                let o = build(&mut g, &probe);
                g.value(o).item()
            };
            probe.get_mut(id).data_mut()[i] = orig - eps;
            let down = {
                let mut g = Graph::inference();
                let o = build(&mut g, &probe);
                g.value(o).item()
            };
            probe.get_mut(id).data_mut()[i] = orig;
            analytic.push(full.data()[i]);
            numeric.push((up - down) / (2.0 * eps));
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::init;
    use crate::autograd::{BoxCoder, RoiAlignSpec};
    use rand::Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn rand_t(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        init::uniform(r, shape, 1.0)
    }

    /// Weighted sum so every output coordinate contributes distinctly.
    fn probe_sum(g: &mut Graph, v: Var, seed: u64) -> Var {
        let w = rand_t(&mut rng(seed), g.shape(v));
        let w = g.constant(w);
        let p = g.mul(v, w);
        g.sum(p)
    }

    #[test]
    fn matmul_all_transpose_combinations() {
        let mut r = rng(1);
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let a = rand_t(&mut r, if ta { &[2, 4, 3] } else { &[2, 3, 4] });
            let b = rand_t(&mut r, if tb { &[2, 5, 4] } else { &[2, 4, 5] });
            let err = check_inputs(
                &[a, b],
                |g, v| {
                    let m = g.matmul_t(v[0], v[1], ta, tb);
                    probe_sum(g, m, 3)
                },
                DEFAULT_EPS,
            );
            assert!(err < 1e-6, "ta={ta} tb={tb} err={err}");
        }
    }

    #[test]
    fn elementwise_and_norm_ops() {
        let mut r = rng(2);
        let x = rand_t(&mut r, &[3, 6]);
        let gamma = rand_t(&mut r, &[6]);
        let beta = rand_t(&mut r, &[6]);
        let err = check_inputs(
            &[x, gamma, beta],
            |g, v| {
                let y = g.layer_norm(v[0], v[1], v[2]);
                let s = g.softmax(y);
                let t = g.sigmoid(s);
                let u = g.add_bias(t, v[1]);
                probe_sum(g, u, 5)
            },
            DEFAULT_EPS,
        );
        assert!(err < 1e-6, "err={err}");
    }

    #[test]
    fn shape_ops() {
        let mut r = rng(3);
        let x = rand_t(&mut r, &[2, 3, 4]);
        let y = rand_t(&mut r, &[3, 4]);
        let err = check_inputs(
            &[x, y],
            |g, v| {
                let p = g.permute3(v[0], [2, 0, 1]);
                let p = g.reshape(p, &[8, 3]);
                let q = g.reshape(v[1], &[4, 3]);
                let c = g.concat_rows(&[p, q]);
                let s = g.gather_rows(c, &[0, 11, 5, 0]);
                probe_sum(g, s, 7)
            },
            DEFAULT_EPS,
        );
        assert!(err < 1e-6, "err={err}");
    }

    #[test]
    fn conv_and_pool() {
        let mut r = rng(4);
        let x = rand_t(&mut r, &[2, 7, 6]);
        let w = rand_t(&mut r, &[3, 2, 3, 3]);
        let b = rand_t(&mut r, &[3]);
        let err = check_inputs(
            &[x, w, b],
            |g, v| {
                let c = g.conv2d(v[0], v[1], Some(v[2]), 2, 1);
                let p = g.adaptive_avg_pool(c, 3, 2);
                probe_sum(g, p, 9)
            },
            DEFAULT_EPS,
        );
        assert!(err < 1e-6, "err={err}");
    }

    #[test]
    fn roi_align_feature_gradient() {
        let mut r = rng(5);
        let fm = rand_t(&mut r, &[3, 5, 5]);
        let boxes = Tensor::new(&[2, 4], vec![0.43, 0.51, 0.37, 0.29, 0.61, 0.38, 0.52, 0.61]);
        let spec = RoiAlignSpec { size: 3, sampling: 2, stride: 4.0, image_h: 20.0, image_w: 20.0, min_size: 1e-3 };
        let err = check_inputs(
            &[fm],
            |g, v| {
                let o = g.roi_align(v[0], &boxes, &spec);
                probe_sum(g, o, 11)
            },
            DEFAULT_EPS,
        );
        assert!(err < 1e-6, "err={err}");
    }

    #[test]
    fn box_deltas_gradient() {
        let mut r = rng(6);
        let deltas = init::uniform(&mut r, &[4, 4], 0.3);
        let base = Tensor::new(&[4, 4], vec![0.5, 0.5, 0.3, 0.2, 0.3, 0.4, 0.2, 0.25, 0.6, 0.7, 0.15, 0.3, 0.45, 0.35, 0.4, 0.3]);
        let err = check_inputs(
            &[deltas, base],
            |g, v| {
                let o = g.apply_deltas(v[0], v[1], BoxCoder::default());
                probe_sum(g, o, 13)
            },
            DEFAULT_EPS,
        );
        assert!(err < 1e-6, "err={err}");
    }

    #[test]
    fn losses() {
        let mut r = rng(7);
        let logits = rand_t(&mut r, &[4, 3]);
        let mut targets = Tensor::zeros(&[4, 3]);
        targets.data_mut()[1] = 1.0;
        targets.data_mut()[8] = 1.0;
        let err = check_inputs(&[logits.clone()], |g, v| g.focal_loss(v[0], &targets, 0.25, 2.0), DEFAULT_EPS);
        assert!(err < 1e-6, "focal err={err}");

        let labels = Tensor::new(&[4], vec![0.0, 1.0, 1.0, 0.0]);
        let flat = logits.clone().reshape(&[12]).data()[..4].to_vec();
        let err = check_inputs(&[Tensor::new(&[4], flat)], |g, v| g.bce_with_logits(v[0], &labels), DEFAULT_EPS);
        assert!(err < 1e-6, "bce err={err}");

        let mut pb = Vec::new();
        let mut tb = Vec::new();
        for _ in 0..5 {
            pb.extend([r.gen_range(0.3..0.7), r.gen_range(0.3..0.7), r.gen_range(0.1..0.4), r.gen_range(0.1..0.4)]);
            tb.extend([r.gen_range(0.3..0.7), r.gen_range(0.3..0.7), r.gen_range(0.1..0.4), r.gen_range(0.1..0.4)]);
        }
        let pred = Tensor::new(&[5, 4], pb);
        let target = Tensor::new(&[5, 4], tb);
        let err = check_inputs(&[pred.clone()], |g, v| g.giou_loss(v[0], &target), DEFAULT_EPS);
        assert!(err < 1e-6, "giou err={err}");
        let err = check_inputs(&[pred], |g, v| g.l1_loss(v[0], &target), DEFAULT_EPS);
        assert!(err < 1e-6, "l1 err={err}");
    }
}
