//! Fused loss ops. Each returns a `[1]` scalar.

use super::basic::sigmoid;
use super::{Graph, Var};
use crate::boxes::{cxcywh_to_xyxy, giou_xyxy};
use crate::tensor::Tensor;

/// `log(1 + exp(x))` without overflow.
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Sigmoid focal loss of one logit against a binary target, and its derivative.
pub(crate) fn focal_term(x: f64, target: f64, alpha: f64, gamma: f64) -> (f64, f64) {
    let (z, sign, a) = if target > 0.5 { (x, 1.0, alpha) } else { (-x, -1.0, 1.0 - alpha) };
    let pt = sigmoid(z);
    let log_pt = -softplus(-z);
    let q = 1.0 - pt;
    let qg = q.powf(gamma);
    let loss = -a * qg * log_pt;
    // dL/dz = a (1-pt)^g [g pt log pt - (1-pt)]
    let dz = a * qg * (gamma * pt * log_pt - q);
    (loss, dz * sign)
}

fn giou_grad(p: &[f64], t: &[f64]) -> (f64, [f64; 4]) {
    let [x1, y1, x2, y2] = cxcywh_to_xyxy(p);
    let [gx1, gy1, gx2, gy2] = cxcywh_to_xyxy(t);
    let iw_raw = x2.min(gx2) - x1.max(gx1);
    let ih_raw = y2.min(gy2) - y1.max(gy1);
    let iw = iw_raw.max(0.0);
    let ih = ih_raw.max(0.0);
    let inter = iw * ih;
    let area_p = (x2 - x1) * (y2 - y1);
    let area_g = (gx2 - gx1) * (gy2 - gy1);
    let union = area_p + area_g - inter;
    let cw = x2.max(gx2) - x1.min(gx1);
    let ch = y2.max(gy2) - y1.min(gy1);
    let enclose = cw * ch;
    let loss = 2.0 - inter / union - union / enclose;

    let d_union = inter / (union * union) - 1.0 / enclose;
    let d_enclose = union / (enclose * enclose);
    let d_inter = -1.0 / union - d_union;
    let d_area_p = d_union;
    let (mut dx1, mut dy1, mut dx2, mut dy2) = (0.0, 0.0, 0.0, 0.0);
    // area_p = (x2-x1)(y2-y1)
    dx2 += d_area_p * (y2 - y1);
    dx1 -= d_area_p * (y2 - y1);
    dy2 += d_area_p * (x2 - x1);
    dy1 -= d_area_p * (x2 - x1);
    if iw_raw > 0.0 && ih_raw > 0.0 {
        let d_iw = d_inter * ih;
        let d_ih = d_inter * iw;
        if x2 < gx2 {
            dx2 += d_iw;
        }
        if x1 > gx1 {
            dx1 -= d_iw;
        }
        if y2 < gy2 {
            dy2 += d_ih;
        }
        if y1 > gy1 {
            dy1 -= d_ih;
        }
    }
    let d_cw = d_enclose * ch;
    let d_ch = d_enclose * cw;
    if x2 > gx2 {
        dx2 += d_cw;
    }
    if x1 < gx1 {
        dx1 -= d_cw;
    }
    if y2 > gy2 {
        dy2 += d_ch;
    }
    if y1 < gy1 {
        dy1 -= d_ch;
    }
    // x1 = cx - w/2, x2 = cx + w/2
    let g = [dx1 + dx2, dy1 + dy2, (dx2 - dx1) / 2.0, (dy2 - dy1) / 2.0];
    (loss, g)
}

impl Graph {
    /// Sigmoid focal loss summed over all `[N, K]` entries.
    pub fn focal_loss(&mut self, logits: Var, targets: &Tensor, alpha: f64, gamma: f64) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.shape(), targets.shape(), "focal target shape");
        let mut total = 0.0;
        let mut grad = Vec::with_capacity(lv.len());
        for (&x, &t) in lv.data().iter().zip(targets.data()) {
            let (l, d) = focal_term(x, t, alpha, gamma);
            total += l;
            grad.push(d);
        }
        let grad = Tensor::new(lv.shape(), grad);
        self.push(Tensor::scalar(total), vec![logits], move |c| {
            let s = c.grad.item();
            vec![Some(grad.map(|g| g * s))]
        })
    }

    /// Summed absolute error against a constant target.
    pub fn l1_loss(&mut self, pred: Var, target: &Tensor) -> Var {
        let pv = self.value(pred);
        assert_eq!(pv.shape(), target.shape(), "l1 target shape");
        let total = pv.data().iter().zip(target.data()).map(|(a, b)| (a - b).abs()).sum();
        let sign = Tensor::new(
            pv.shape(),
            pv.data().iter().zip(target.data()).map(|(a, b)| (a - b).signum() * ((a - b) != 0.0) as u8 as f64).collect(),
        );
        self.push(Tensor::scalar(total), vec![pred], move |c| {
            let s = c.grad.item();
            vec![Some(sign.map(|g| g * s))]
        })
    }

    /// Summed `1 - GIoU` for `[M, 4]` boxes in `(cx, cy, w, h)` against a constant target.
    pub fn giou_loss(&mut self, pred: Var, target: &Tensor) -> Var {
        let pv = self.value(pred);
        assert_eq!(pv.shape(), target.shape(), "giou target shape");
        let m = pv.rows();
        let mut total = 0.0;
        let mut grad = Vec::with_capacity(m * 4);
        for i in 0..m {
            let (l, g) = giou_grad(pv.row(i), target.row(i));
            debug_assert!((l - (1.0 - giou_xyxy(&cxcywh_to_xyxy(pv.row(i)), &cxcywh_to_xyxy(target.row(i))))).abs() < 1e-9);
            total += l;
            grad.extend_from_slice(&g);
        }
        let grad = Tensor::new(&[m, 4], grad);
        self.push(Tensor::scalar(total), vec![pred], move |c| {
            let s = c.grad.item();
            vec![Some(grad.map(|g| g * s))]
        })
    }

    /// Mean binary cross-entropy computed from logits.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &Tensor) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.len(), labels.len(), "bce label count");
        let m = lv.len() as f64;
        let total: f64 =
            lv.data().iter().zip(labels.data()).map(|(&x, &y)| x.max(0.0) - x * y + (-x.abs()).exp().ln_1p()).sum();
        let grad = Tensor::new(
            lv.shape(),
            lv.data().iter().zip(labels.data()).map(|(&x, &y)| (sigmoid(x) - y) / m).collect(),
        );
        self.push(Tensor::scalar(total / m), vec![logits], move |c| {
            let s = c.grad.item();
            vec![Some(grad.map(|g| g * s))]
        })
    }
}
