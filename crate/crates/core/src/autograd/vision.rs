//! Convolution, pooling, RoIAlign and box-delta ops.

use serde::{Deserialize, Serialize};

use super::{Graph, Var};
use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoiAlignSpec {
    /// Output resolution `S` (S x S bins).
    pub size: usize,
    /// Bilinear samples per bin along each axis.
    pub sampling: usize,
    /// Feature-map stride in image pixels.
    pub stride: f64,
    pub image_h: f64,
    pub image_w: f64,
    /// Smallest normalized box side; narrower boxes are widened about their centre.
    pub min_size: f64,
}

struct Tap {
    idx: [usize; 4],
    w: [f64; 4],
}

/// Bilinear taps at feature coordinate `(y, x)`; `None` when the point lies
/// outside the map by more than one cell.
fn bilinear_tap(y: f64, x: f64, h: usize, w: usize) -> Option<Tap> {
    if y < -1.0 || y > h as f64 || x < -1.0 || x > w as f64 {
        return None;
    }
    let mut y = y.max(0.0);
    let mut x = x.max(0.0);
    let mut y0 = y.floor() as usize;
    let mut x0 = x.floor() as usize;
    let y1;
    let x1;
    if y0 >= h - 1 {
        y0 = h - 1;
        y1 = h - 1;
        y = y0 as f64;
    } else {
        y1 = y0 + 1;
    }
    if x0 >= w - 1 {
        x0 = w - 1;
        x1 = w - 1;
        x = x0 as f64;
    } else {
        x1 = x0 + 1;
    }
    let ly = y - y0 as f64;
    let lx = x - x0 as f64;
    let hy = 1.0 - ly;
    let hx = 1.0 - lx;
    Some(Tap {
        idx: [y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1],
        w: [hy * hx, hy * lx, ly * hx, ly * lx],
    })
}

/// Per-bin sample taps for every box: `taps[(n * S*S + bin)]`.
fn roi_taps(h: usize, w: usize, boxes: &Tensor, spec: &RoiAlignSpec) -> (Vec<Vec<Tap>>, f64) {
    let s = spec.size;
    let sr = spec.sampling.max(1);
    let mut all = Vec::with_capacity(boxes.rows() * s * s);
    for b in 0..boxes.rows() {
        let bx = boxes.row(b);
        let bw = bx[2].max(spec.min_size);
        let bh = bx[3].max(spec.min_size);
        let x0 = (bx[0] - bw / 2.0) * spec.image_w / spec.stride - 0.5;
        let y0 = (bx[1] - bh / 2.0) * spec.image_h / spec.stride - 0.5;
        let bin_w = bw * spec.image_w / spec.stride / s as f64;
        let bin_h = bh * spec.image_h / spec.stride / s as f64;
        for i in 0..s {
            for j in 0..s {
                let mut taps = Vec::with_capacity(sr * sr);
                for iy in 0..sr {
                    let y = y0 + (i as f64 + (iy as f64 + 0.5) / sr as f64) * bin_h;
                    for ix in 0..sr {
                        let x = x0 + (j as f64 + (ix as f64 + 0.5) / sr as f64) * bin_w;
                        if let Some(t) = bilinear_tap(y, x, h, w) {
                            taps.push(t);
                        }
                    }
                }
                all.push(taps);
            }
        }
    }
    (all, 1.0 / (sr * sr) as f64)
}

/// Forward RoIAlign on a `[C, H, W]` map: returns `[N, S*S, C]`.
pub fn roi_align_forward(fm: &Tensor, boxes: &Tensor, spec: &RoiAlignSpec) -> Tensor {
    let (c, h, w) = (fm.dim(0), fm.dim(1), fm.dim(2));
    let (taps, norm) = roi_taps(h, w, boxes, spec);
    roi_gather(fm.data(), c, h * w, &taps, norm, boxes.rows(), spec.size)
}

fn roi_gather(fm: &[f64], c: usize, hw: usize, taps: &[Vec<Tap>], norm: f64, n: usize, s: usize) -> Tensor {
    let mut out = vec![0.0; taps.len() * c];
    for (bin, ts) in taps.iter().enumerate() {
        let dst = &mut out[bin * c..(bin + 1) * c];
        for t in ts {
            for k in 0..4 {
                let wk = t.w[k] * norm;
                if wk == 0.0 {
                    continue;
                }
                let idx = t.idx[k];
                for (ch, d) in dst.iter_mut().enumerate() {
                    *d += wk * fm[ch * hw + idx];
                }
            }
        }
    }
    Tensor::new(&[n, s * s, c], out)
}

/// Box decoding: `(dx, dy, dw, dh)` deltas relative to an input box in
/// normalized `(cx, cy, w, h)`, followed by clipping to the unit square.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxCoder {
    pub weights: [f64; 4],
    /// Bound on `|dw|`, `|dh|` after weighting.
    pub scale_clamp: f64,
    pub min_size: f64,
}

impl Default for BoxCoder {
    fn default() -> Self {
        Self { weights: [2.0, 2.0, 1.0, 1.0], scale_clamp: (1000.0f64 / 16.0).ln(), min_size: 1e-3 }
    }
}

struct AxisGrad {
    d_center: f64,
    d_size: f64,
}

impl BoxCoder {
    /// Decodes a single axis. Returns `(center, size)` and the mapping from
    /// output grads to `(pre-clip center, pre-clip size)` grads.
    fn axis(&self, c: f64, s: f64, dc: f64, ds: f64) -> ((f64, f64), impl Fn(f64, f64) -> AxisGrad) {
        let ds_c = ds.clamp(-self.scale_clamp, self.scale_clamp);
        let pc = c + dc * s;
        let ps = s * ds_c.exp();
        let lo = pc - ps / 2.0;
        let hi = pc + ps / 2.0;
        let loc = lo.clamp(0.0, 1.0);
        let hic = hi.clamp(0.0, 1.0);
        let mut size = hic - loc;
        let mut center = (loc + hic) / 2.0;
        let degenerate = size < self.min_size;
        if degenerate {
            size = self.min_size;
            center = center.clamp(size / 2.0, 1.0 - size / 2.0);
        }
        let lo_in = lo > 0.0 && lo < 1.0;
        let hi_in = hi > 0.0 && hi < 1.0;
        let back = move |g_center: f64, g_size: f64| {
            if degenerate {
                return AxisGrad { d_center: 0.0, d_size: 0.0 };
            }
            let d_lo = if lo_in { g_center / 2.0 - g_size } else { 0.0 };
            let d_hi = if hi_in { g_center / 2.0 + g_size } else { 0.0 };
            AxisGrad { d_center: d_lo + d_hi, d_size: (d_hi - d_lo) / 2.0 }
        };
        ((center, size), back)
    }

    pub fn decode(&self, deltas: &[f64], base: &[f64]) -> [f64; 4] {
        let d = self.scaled(deltas);
        let ((cx, w), _) = self.axis(base[0], base[2], d[0], d[2]);
        let ((cy, h), _) = self.axis(base[1], base[3], d[1], d[3]);
        [cx, cy, w, h]
    }

    fn scaled(&self, deltas: &[f64]) -> [f64; 4] {
        [deltas[0] / self.weights[0], deltas[1] / self.weights[1], deltas[2] / self.weights[2], deltas[3] / self.weights[3]]
    }
}

impl Graph {
    /// 2-D convolution of a single `[C_in, H, W]` image with `[C_out, C_in, k, k]` kernels.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, stride: usize, pad: usize) -> Var {
        let xv = self.value(x);
        let wv = self.value(weight);
        let (cin, h, w) = (xv.dim(0), xv.dim(1), xv.dim(2));
        let (cout, kc, kh, kw) = (wv.dim(0), wv.dim(1), wv.dim(2), wv.dim(3));
        assert_eq!(cin, kc, "conv channel mismatch");
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        let geom = ConvGeom { cin, h, w, kh, kw, stride, pad, ho, wo };
        let cols = geom.im2col(xv.data());
        let k = cin * kh * kw;
        let p = ho * wo;
        let mut out = vec![0.0; cout * p];
        gemm(cout, k, p, wv.data(), false, &cols, false, &mut out, 0.0);
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for (o, row) in out.chunks_mut(p).enumerate() {
                for v in row.iter_mut() {
                    *v += bv[o];
                }
            }
        }
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        self.push(Tensor::new(&[cout, ho, wo], out), inputs, move |c| {
            let gd = c.grad.data();
            let gx = c.needs[0].then(|| {
                let mut dcols = vec![0.0; k * p];
                gemm(k, cout, p, c.inputs[1].data(), true, gd, false, &mut dcols, 0.0);
                Tensor::new(c.inputs[0].shape(), geom.col2im(&dcols))
            });
            let gw = c.needs[1].then(|| {
                let mut dw = vec![0.0; cout * k];
                gemm(cout, p, k, gd, false, &cols, true, &mut dw, 0.0);
                Tensor::new(c.inputs[1].shape(), dw)
            });
            let mut res = vec![gx, gw];
            if c.inputs.len() == 3 {
                res.push(c.needs[2].then(|| Tensor::new(&[cout], gd.chunks(p).map(|r| r.iter().sum()).collect())));
            }
            res
        })
    }

    /// Adaptive average pooling of `[C, H, W]` to `[C, oh, ow]`.
    pub fn adaptive_avg_pool(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let xv = self.value(x);
        let (c, h, w) = (xv.dim(0), xv.dim(1), xv.dim(2));
        let bins_y: Vec<(usize, usize)> = (0..oh).map(|i| (i * h / oh, ((i + 1) * h).div_ceil(oh))).collect();
        let bins_x: Vec<(usize, usize)> = (0..ow).map(|j| (j * w / ow, ((j + 1) * w).div_ceil(ow))).collect();
        let mut out = vec![0.0; c * oh * ow];
        let src = xv.data();
        for ch in 0..c {
            for (i, &(y0, y1)) in bins_y.iter().enumerate() {
                for (j, &(x0, x1)) in bins_x.iter().enumerate() {
                    let mut s = 0.0;
                    for y in y0..y1 {
                        for xx in x0..x1 {
                            s += src[(ch * h + y) * w + xx];
                        }
                    }
                    out[(ch * oh + i) * ow + j] = s / ((y1 - y0) * (x1 - x0)) as f64;
                }
            }
        }
        self.push(Tensor::new(&[c, oh, ow], out), vec![x], move |ctx| {
            let g = ctx.grad.data();
            let mut gx = vec![0.0; c * h * w];
            for ch in 0..c {
                for (i, &(y0, y1)) in bins_y.iter().enumerate() {
                    for (j, &(x0, x1)) in bins_x.iter().enumerate() {
                        let v = g[(ch * oh + i) * ow + j] / ((y1 - y0) * (x1 - x0)) as f64;
                        for y in y0..y1 {
                            for xx in x0..x1 {
                                gx[(ch * h + y) * w + xx] += v;
                            }
                        }
                    }
                }
            }
            vec![Some(Tensor::new(&[c, h, w], gx))]
        })
    }

    /// RoIAlign of a `[C, H, W]` feature map over constant `[N, 4]` boxes.
    /// Output is `[N, S*S, C]`; gradients flow to the feature map only.
    pub fn roi_align(&mut self, fm: Var, boxes: &Tensor, spec: &RoiAlignSpec) -> Var {
        let fv = self.value(fm);
        let (c, h, w) = (fv.dim(0), fv.dim(1), fv.dim(2));
        let (taps, norm) = roi_taps(h, w, boxes, spec);
        let out = roi_gather(fv.data(), c, h * w, &taps, norm, boxes.rows(), spec.size);
        self.push(out, vec![fm], move |ctx| {
            let g = ctx.grad.data();
            let hw = h * w;
            let mut gf = vec![0.0; c * hw];
            for (bin, ts) in taps.iter().enumerate() {
                let src = &g[bin * c..(bin + 1) * c];
                for t in ts {
                    for k in 0..4 {
                        let wk = t.w[k] * norm;
                        if wk == 0.0 {
                            continue;
                        }
                        let idx = t.idx[k];
                        for (ch, gv) in src.iter().enumerate() {
                            gf[ch * hw + idx] += wk * gv;
                        }
                    }
                }
            }
            vec![Some(Tensor::new(&[c, h, w], gf))]
        })
    }

    /// Applies `[N, 4]` deltas to `[N, 4]` base boxes with `coder`.
    pub fn apply_deltas(&mut self, deltas: Var, base: Var, coder: BoxCoder) -> Var {
        let dv = self.value(deltas);
        let bv = self.value(base);
        assert_eq!(dv.shape(), bv.shape());
        let n = dv.rows();
        let mut out = Vec::with_capacity(n * 4);
        for i in 0..n {
            out.extend_from_slice(&coder.decode(dv.row(i), bv.row(i)));
        }
        self.push(Tensor::new(&[n, 4], out), vec![deltas, base], move |ctx| {
            let (dv, bv) = (ctx.inputs[0], ctx.inputs[1]);
            let mut gd = vec![0.0; n * 4];
            let mut gb = vec![0.0; n * 4];
            for i in 0..n {
                let raw = dv.row(i);
                let d = coder.scaled(raw);
                let b = bv.row(i);
                let g = ctx.grad.row(i);
                for (ci, si) in [(0usize, 2usize), (1, 3)] {
                    let (_, back) = coder.axis(b[ci], b[si], d[ci], d[si]);
                    let AxisGrad { d_center, d_size } = back(g[ci], g[si]);
                    let ds_c = d[si].clamp(-coder.scale_clamp, coder.scale_clamp);
                    let e = ds_c.exp();
                    let unclamped = d[si].abs() < coder.scale_clamp;
                    // pc = c + dc * s ; ps = s * exp(ds)
                    gd[i * 4 + ci] = d_center * b[si] / coder.weights[ci];
                    gd[i * 4 + si] = if unclamped { d_size * b[si] * e / coder.weights[si] } else { 0.0 };
                    gb[i * 4 + ci] = d_center;
                    gb[i * 4 + si] = d_center * d[ci] + d_size * e;
                }
            }
            vec![
                ctx.needs[0].then(|| Tensor::new(&[n, 4], gd)),
                ctx.needs[1].then(|| Tensor::new(&[n, 4], gb)),
            ]
        })
    }
}

#[derive(Clone, Copy)]
struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn src_index(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky) as isize - self.pad as isize;
        let x = (ox * self.stride + kx) as isize - self.pad as isize;
        (y >= 0 && x >= 0 && (y as usize) < self.h && (x as usize) < self.w).then_some((y as usize, x as usize))
    }

    fn im2col(&self, src: &[f64]) -> Vec<f64> {
        let p = self.ho * self.wo;
        let mut cols = vec![0.0; self.cin * self.kh * self.kw * p];
        for c in 0..self.cin {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = ((c * self.kh + ky) * self.kw + kx) * p;
                    for oy in 0..self.ho {
                        for ox in 0..self.wo {
                            if let Some((y, x)) = self.src_index(oy, ox, ky, kx) {
                                cols[row + oy * self.wo + ox] = src[(c * self.h + y) * self.w + x];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let p = self.ho * self.wo;
        let mut img = vec![0.0; self.cin * self.h * self.w];
        for c in 0..self.cin {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = ((c * self.kh + ky) * self.kw + kx) * p;
                    for oy in 0..self.ho {
                        for ox in 0..self.wo {
                            if let Some((y, x)) = self.src_index(oy, ox, ky, kx) {
                                img[(c * self.h + y) * self.w + x] += cols[row + oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
        img
    }
}
