//! Elementwise, linear-algebra and shape ops.

use super::{Graph, Var};
use crate::tensor::{gemm, Tensor};

const LN_EPS: f64 = 1e-5;

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    assert_eq!(a.shape(), b.shape(), "elementwise shape mismatch");
    Tensor::new(a.shape(), a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect())
}

/// Splits a rank-2 or rank-3 shape into `(batch, rows, cols)`.
fn as_batched(shape: &[usize]) -> (usize, usize, usize) {
    match shape {
        [r, c] => (1, *r, *c),
        [b, r, c] => (*b, *r, *c),
        _ => panic!("matmul expects rank 2 or 3, got {shape:?}"),
    }
}

impl Graph {
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        self.push(out, vec![a, b], |c| vec![c.needs[0].then(|| c.grad.clone()), c.needs[1].then(|| c.grad.clone())])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        self.push(out, vec![a, b], |c| {
            vec![c.needs[0].then(|| c.grad.clone()), c.needs[1].then(|| c.grad.map(|g| -g))]
        })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        self.push(out, vec![a, b], |c| {
            vec![
                c.needs[0].then(|| zip_map(c.grad, c.inputs[1], |g, y| g * y)),
                c.needs[1].then(|| zip_map(c.grad, c.inputs[0], |g, x| g * x)),
            ]
        })
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, vec![a], move |c| vec![Some(c.grad.map(|g| g * s))])
    }

    /// Sum of several same-shaped values.
    pub fn add_all(&mut self, vars: &[Var]) -> Var {
        let mut acc = vars[0];
        for &v in &vars[1..] {
            acc = self.add(acc, v);
        }
        acc
    }

    /// Adds a `[n]` bias to every row of a `[.., n]` tensor.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let xv = self.value(x);
        let n = *xv.shape().last().unwrap();
        assert_eq!(self.value(b).len(), n, "bias width mismatch");
        let bv = self.value(b).data().to_vec();
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, bb) in row.iter_mut().zip(&bv) {
                *o += bb;
            }
        }
        self.push(out, vec![x, b], move |c| {
            let gb = c.needs[1].then(|| {
                let mut s = vec![0.0; n];
                for row in c.grad.data().chunks(n) {
                    for (acc, g) in s.iter_mut().zip(row) {
                        *acc += g;
                    }
                }
                Tensor::new(c.inputs[1].shape(), s)
            });
            vec![c.needs[0].then(|| c.grad.clone()), gb]
        })
    }

    /// Batched matrix product `op(a) @ op(b)` over rank-2 or rank-3 operands.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (ba, ra, ca) = as_batched(self.value(a).shape());
        let (bb, rb, cb) = as_batched(self.value(b).shape());
        assert_eq!(ba, bb, "batch mismatch");
        let (m, k) = if ta { (ca, ra) } else { (ra, ca) };
        let (k2, n) = if tb { (cb, rb) } else { (rb, cb) };
        assert_eq!(k, k2, "inner dim mismatch {:?} x {:?}", self.shape(a), self.shape(b));
        let rank3 = self.value(a).rank() == 3;
        let mut out = vec![0.0; ba * m * n];
        {
            let ad = self.value(a).data();
            let bd = self.value(b).data();
            for i in 0..ba {
                gemm(
                    m,
                    k,
                    n,
                    &ad[i * m * k..(i + 1) * m * k],
                    ta,
                    &bd[i * k * n..(i + 1) * k * n],
                    tb,
                    &mut out[i * m * n..(i + 1) * m * n],
                    0.0,
                );
            }
        }
        let shape: Vec<usize> = if rank3 { vec![ba, m, n] } else { vec![m, n] };
        self.push(Tensor::new(&shape, out), vec![a, b], move |c| {
            let gd = c.grad.data();
            let ad = c.inputs[0].data();
            let bd = c.inputs[1].data();
            let ga = c.needs[0].then(|| {
                let mut g = vec![0.0; ba * m * k];
                for i in 0..ba {
                    let gs = &gd[i * m * n..(i + 1) * m * n];
                    let bs = &bd[i * k * n..(i + 1) * k * n];
                    let dst = &mut g[i * m * k..(i + 1) * m * k];
                    if ta {
                        gemm(k, n, m, bs, tb, gs, true, dst, 0.0);
                    } else {
                        gemm(m, n, k, gs, false, bs, !tb, dst, 0.0);
                    }
                }
                Tensor::new(c.inputs[0].shape(), g)
            });
            let gb = c.needs[1].then(|| {
                let mut g = vec![0.0; ba * k * n];
                for i in 0..ba {
                    let gs = &gd[i * m * n..(i + 1) * m * n];
                    let as_ = &ad[i * m * k..(i + 1) * m * k];
                    let dst = &mut g[i * k * n..(i + 1) * k * n];
                    if tb {
                        gemm(n, m, k, gs, true, as_, ta, dst, 0.0);
                    } else {
                        gemm(k, m, n, as_, !ta, gs, false, dst, 0.0);
                    }
                }
                Tensor::new(c.inputs[1].shape(), g)
            });
            vec![ga, gb]
        })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, false)
    }

    /// `x @ w + b` with `w: [in, out]`. Rank-3 inputs are flattened over the
    /// leading two axes.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let shape = self.shape(x).to_vec();
        let flat = if shape.len() == 2 { x } else { self.reshape(x, &[shape[..shape.len() - 1].iter().product(), shape[shape.len() - 1]]) };
        let mut y = self.matmul(flat, w);
        if let Some(b) = b {
            y = self.add_bias(y, b);
        }
        if shape.len() == 2 {
            y
        } else {
            let mut out_shape = shape.clone();
            *out_shape.last_mut().unwrap() = self.shape(w)[1];
            self.reshape(y, &out_shape)
        }
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, vec![x], |c| vec![Some(zip_map(c.grad, c.inputs[0], |g, x| if x > 0.0 { g } else { 0.0 }))])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push(out, vec![x], |c| vec![Some(zip_map(c.grad, c.out, |g, y| g * y * (1.0 - y)))])
    }

    /// Normalizes the last axis, then applies `gamma * x + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let n = *xv.shape().last().unwrap();
        let rows = xv.len() / n;
        let gv = self.value(gamma).data().to_vec();
        let bv = self.value(beta).data();
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv.data()[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * gv[j] + bv[j];
            }
        }
        let out = Tensor::new(xv.shape(), out);
        self.push(out, vec![x, gamma, beta], move |c| {
            let gd = c.grad.data();
            let gx = c.needs[0].then(|| {
                let mut gx = vec![0.0; gd.len()];
                for r in 0..rows {
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for j in 0..n {
                        let d = gd[r * n + j] * gv[j];
                        mean_d += d;
                        mean_dx += d * xhat[r * n + j];
                    }
                    mean_d /= n as f64;
                    mean_dx /= n as f64;
                    for j in 0..n {
                        let d = gd[r * n + j] * gv[j];
                        gx[r * n + j] = rstd[r] * (d - mean_d - xhat[r * n + j] * mean_dx);
                    }
                }
                Tensor::new(c.inputs[0].shape(), gx)
            });
            let gg = c.needs[1].then(|| {
                let mut s = vec![0.0; n];
                for (i, g) in gd.iter().enumerate() {
                    s[i % n] += g * xhat[i];
                }
                Tensor::new(&[n], s)
            });
            let gb = c.needs[2].then(|| {
                let mut s = vec![0.0; n];
                for (i, g) in gd.iter().enumerate() {
                    s[i % n] += g;
                }
                Tensor::new(&[n], s)
            });
            vec![gx, gg, gb]
        })
    }

    /// Softmax over the last axis. Rows of length zero are left empty.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = *xv.shape().last().unwrap();
        let mut out = xv.clone();
        if n > 0 {
            for row in out.data_mut().chunks_mut(n) {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - m).exp();
                    s += *v;
                }
                for v in row.iter_mut() {
                    *v /= s;
                }
            }
        }
        self.push(out, vec![x], move |c| {
            let mut gx = c.grad.clone();
            for (gr, yr) in gx.data_mut().chunks_mut(n.max(1)).zip(c.out.data().chunks(n.max(1))) {
                let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                for (g, y) in gr.iter_mut().zip(yr) {
                    *g = y * (*g - dot);
                }
            }
            vec![Some(gx)]
        })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self.value(x).clone().reshape(shape);
        self.push(out, vec![x], |c| vec![Some(c.grad.clone().reshape(c.inputs[0].shape()))])
    }

    /// Axis permutation of a rank-3 tensor: output axis `i` is input axis `perm[i]`.
    pub fn permute3(&mut self, x: Var, perm: [usize; 3]) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rank(), 3);
        let out = permute3(xv, perm);
        let mut inv = [0usize; 3];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        self.push(out, vec![x], move |c| vec![Some(permute3(c.grad, inv))])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let out = {
            let ts: Vec<&Tensor> = parts.iter().map(|&v| self.value(v)).collect();
            Tensor::concat_rows(&ts)
        };
        let sizes: Vec<usize> = parts.iter().map(|&v| self.value(v).len()).collect();
        self.push(out, parts.to_vec(), move |c| {
            let mut off = 0;
            sizes
                .iter()
                .enumerate()
                .map(|(i, &s)| {
                    let g = c.needs[i].then(|| Tensor::new(c.inputs[i].shape(), c.grad.data()[off..off + s].to_vec()));
                    off += s;
                    g
                })
                .collect()
        })
    }

    /// Selects entries along axis 0; repeated indices accumulate gradient.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let out = self.value(x).gather_rows(idx);
        let idx = idx.to_vec();
        self.push(out, vec![x], move |c| {
            let mut g = Tensor::zeros(c.inputs[0].shape());
            for (k, &i) in idx.iter().enumerate() {
                for (dst, src) in g.row_mut(i).iter_mut().zip(c.grad.row(k)) {
                    *dst += src;
                }
            }
            vec![Some(g)]
        })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), vec![x], |c| vec![Some(Tensor::full(c.inputs[0].shape(), c.grad.item()))])
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn permute3(x: &Tensor, perm: [usize; 3]) -> Tensor {
    let s = x.shape();
    let os = [s[perm[0]], s[perm[1]], s[perm[2]]];
    let strides = [s[1] * s[2], s[2], 1];
    let ps = [strides[perm[0]], strides[perm[1]], strides[perm[2]]];
    let src = x.data();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..os[0] {
        for j in 0..os[1] {
            let base = i * ps[0] + j * ps[1];
            for k in 0..os[2] {
                out.push(src[base + k * ps[2]]);
            }
        }
    }
    Tensor::new(&os, out)
}
