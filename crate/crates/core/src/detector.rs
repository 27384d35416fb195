//! Query-based image detector: strided conv backbone, learnable proposal
//! queries and boxes, and a stack of dynamic head stages trained with a
//! set-prediction loss.

use rand::Rng;

use crate::autograd::{BoxCoder, Graph, RoiAlignSpec, Var};
use crate::boxes;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{Attention, Branch, LayerNorm, Linear};
use crate::params::{init, ParamId, ParamStore};
use crate::synthdata::ObjectAnnotation;
use crate::tensor::Tensor;

/// Backbone output `[C_feat, H', W']`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub data: Tensor,
    pub stride: usize,
}

/// `N x C` query features.
#[derive(Clone, Debug, PartialEq)]
pub struct QuerySet(pub Tensor);

/// `N x 4` normalized `(cx, cy, w, h)` boxes.
#[derive(Clone, Debug, PartialEq)]
pub struct BoxSet(pub Tensor);

/// `N x K` per-class probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreSet(pub Tensor);

impl ScoreSet {
    pub fn from_logits(logits: &Tensor) -> Self {
        ScoreSet(logits.map(crate::autograd::sigmoid))
    }

    /// Highest class probability and its class for every row.
    pub fn best(&self) -> Vec<(usize, f64)> {
        (0..self.0.rows())
            .map(|i| {
                self.0.row(i).iter().enumerate().fold((0, f64::NEG_INFINITY), |b, (c, &p)| if p > b.1 { (c, p) } else { b })
            })
            .collect()
    }
}

/// `N x S*S x C` region features.
#[derive(Clone, Debug, PartialEq)]
pub struct RoiFeatures(pub Tensor);

#[derive(Clone, Debug)]
pub struct Backbone {
    pub convs: Vec<(ParamId, ParamId, usize)>,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, channels: &[usize], downsample: usize) -> Self {
        let mut cin = 3;
        let convs = channels
            .iter()
            .enumerate()
            .map(|(i, &cout)| {
                let w = store.add(format!("backbone.conv{i}.weight"), init::kaiming(rng, &[cout, cin, 3, 3]));
                let b = store.add(format!("backbone.conv{i}.bias"), Tensor::zeros(&[cout]));
                cin = cout;
                (w, b, if i < downsample { 2 } else { 1 })
            })
            .collect();
        Self { convs }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, image: Var) -> Var {
        let mut x = image;
        for (i, &(w, b, stride)) in self.convs.iter().enumerate() {
            let (w, b) = (g.param(store, w), g.param(store, b));
            x = g.conv2d(x, w, Some(b), stride, 1);
            if i + 1 < self.convs.len() {
                x = g.relu(x);
            }
        }
        x
    }
}

/// Per-query 1x1 interaction whose two kernels are generated from the query.
#[derive(Clone, Debug)]
pub struct DynamicConv {
    pub feat: usize,
    pub dim: usize,
    pub hidden: usize,
    pub bins: usize,
    pub kernels: Linear,
    pub norm1: LayerNorm,
    pub norm2: LayerNorm,
    pub out: Linear,
    pub norm3: LayerNorm,
}

impl DynamicConv {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, cfg: &ModelConfig) -> Self {
        let (feat, dim, hidden) = (cfg.feat_channels(), cfg.query_dim, cfg.dyn_hidden);
        let bins = cfg.roi_size * cfg.roi_size;
        Self {
            feat,
            dim,
            hidden,
            bins,
            kernels: Linear::new(store, rng, &format!("{name}.kernels"), dim, (feat + dim) * hidden),
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), hidden),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            out: Linear::new(store, rng, &format!("{name}.out"), bins * dim, dim),
            norm3: LayerNorm::new(store, &format!("{name}.norm3"), dim),
        }
    }

    /// `roi: [N, S*S, C_feat]`, `q: [N, C]` → `[N, C]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, roi: Var, q: Var) -> Var {
        g.count_interaction();
        let n = g.shape(q)[0];
        let (cf, c, dh) = (self.feat, self.dim, self.hidden);
        let k = self.kernels.forward(g, store, q);
        // first C_feat*D_h columns form the first kernel, the rest the second
        let k = g.reshape(k, &[n * (cf + c), dh]);
        let (i1, i2): (Vec<usize>, Vec<usize>) = (0..n * (cf + c)).partition(|r| r % (cf + c) < cf);
        let k1 = g.gather_rows(k, &i1);
        let k2 = g.gather_rows(k, &i2);
        let k1 = g.reshape(k1, &[n, cf, dh]);
        let k2 = g.reshape(k2, &[n, dh, c]);
        let f = g.matmul(roi, k1);
        let f = self.norm1.forward(g, store, f);
        let f = g.relu(f);
        let f = g.matmul(f, k2);
        let f = self.norm2.forward(g, store, f);
        let f = g.relu(f);
        let f = g.reshape(f, &[n, self.bins * c]);
        let f = self.out.forward(g, store, f);
        let f = self.norm3.forward(g, store, f);
        g.relu(f)
    }
}

/// One iterative refinement stage: self-attention, dynamic interaction and
/// the classification / regression branches.
#[derive(Clone, Debug)]
pub struct DynamicStage {
    pub attn_norm: LayerNorm,
    pub attn: Attention,
    pub dynconv: DynamicConv,
    pub cls: Branch,
    pub reg: Branch,
}

impl DynamicStage {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        cfg: &ModelConfig,
        num_classes: usize,
        predictors: Option<(&Branch, &Branch)>,
    ) -> Self {
        let c = cfg.query_dim;
        let (cls, reg) = match predictors {
            Some((cls, reg)) => (cls.clone(), reg.clone()),
            None => Self::predictors(store, rng, name, c, num_classes),
        };
        Self {
            attn_norm: LayerNorm::new(store, &format!("{name}.attn_norm"), c),
            attn: Attention::new(store, rng, &format!("{name}.attn"), c, cfg.attn_heads),
            dynconv: DynamicConv::new(store, rng, &format!("{name}.dynconv"), cfg),
            cls,
            reg,
        }
    }

    pub fn predictors(store: &mut ParamStore, rng: &mut impl Rng, name: &str, c: usize, k: usize) -> (Branch, Branch) {
        let cls_out = Linear::new(store, rng, &format!("{name}.cls.logits"), c, k);
        // prior probability 0.01 for every class
        store.set(cls_out.b.unwrap(), Tensor::full(&[k], -(99.0f64).ln()));
        let cls = Branch::new(store, rng, &format!("{name}.cls"), c, cls_out);
        let reg_out = Linear::new(store, rng, &format!("{name}.reg.deltas"), c, 4);
        let w = store.get(reg_out.w).map(|v| v * 0.01);
        store.set(reg_out.w, w);
        let reg = Branch::new(store, rng, &format!("{name}.reg"), c, reg_out);
        (cls, reg)
    }

    /// Query update: `q* = q + MSA(LN(q))`, `q' = q* + DynConv(RoIAlign(fm, b), q*)`.
    pub fn update(&self, g: &mut Graph, store: &ParamStore, fm: Var, q: Var, b: &Tensor, spec: &RoiAlignSpec) -> Var {
        let roi = g.roi_align(fm, b, spec);
        let qn = self.attn_norm.forward(g, store, q);
        let (a, _) = self.attn.forward(g, store, qn, qn, None);
        let q_star = g.add(q, a);
        let d = self.dynconv.forward(g, store, roi, q_star);
        g.add(q_star, d)
    }

    /// Class logits and refined boxes, with deltas applied to `base`.
    pub fn predict(&self, g: &mut Graph, store: &ParamStore, q: Var, base: Var) -> (Var, Var) {
        let logits = self.cls.forward(g, store, q);
        let deltas = self.reg.forward(g, store, q);
        let boxes = g.apply_deltas(deltas, base, BoxCoder::default());
        (logits, boxes)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct StageOutput {
    pub queries: Var,
    pub logits: Var,
    pub boxes: Var,
}

#[derive(Clone, Debug)]
pub struct Detector {
    pub num_queries: usize,
    pub num_classes: usize,
    pub image_hw: (usize, usize),
    pub roi: RoiAlignSpec,
    pub backbone: Backbone,
    pub init_queries: ParamId,
    pub init_boxes: ParamId,
    pub stages: Vec<DynamicStage>,
}

impl Detector {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        cfg: &ModelConfig,
        num_classes: usize,
        image_hw: (usize, usize),
    ) -> Self {
        let backbone = Backbone::new(store, rng, &cfg.backbone_channels, cfg.downsample_blocks);
        let init_queries = store.add("key.init_queries", init::normal(rng, &[cfg.num_queries, cfg.query_dim], 1.0));
        let init_boxes =
            store.add("key.init_boxes", Tensor::new(&[cfg.num_queries, 4], [0.5, 0.5, 1.0, 1.0].repeat(cfg.num_queries)));
        let shared = cfg.share_predictors.then(|| DynamicStage::predictors(store, rng, "key.shared", cfg.query_dim, num_classes));
        let stages = (0..cfg.stages)
            .map(|i| {
                let p = shared.as_ref().map(|(c, r)| (c, r));
                DynamicStage::new(store, rng, &format!("key.stage{i}"), cfg, num_classes, p)
            })
            .collect();
        Self {
            num_queries: cfg.num_queries,
            num_classes,
            image_hw,
            roi: RoiAlignSpec {
                size: cfg.roi_size,
                sampling: cfg.roi_sampling,
                stride: cfg.stride() as f64,
                image_h: image_hw.0 as f64,
                image_w: image_hw.1 as f64,
                min_size: 1e-3,
            },
            backbone,
            init_queries,
            init_boxes,
            stages,
        }
    }

    pub fn stride(&self) -> usize {
        self.roi.stride as usize
    }

    fn check_image(&self, shape: &[usize]) -> Result<()> {
        if shape != [3, self.image_hw.0, self.image_hw.1] {
            return Err(Error::Shape(format!("image shape {shape:?}, model expects [3, {}, {}]", self.image_hw.0, self.image_hw.1)));
        }
        Ok(())
    }

    /// Backbone on a `[3, H, W]` image inside an existing graph.
    pub fn features(&self, g: &mut Graph, store: &ParamStore, image: &Tensor) -> Result<Var> {
        self.check_image(image.shape())?;
        let x = g.constant(image.clone());
        Ok(self.backbone.forward(g, store, x))
    }

    pub fn extract_features(&self, store: &ParamStore, image: &Tensor) -> Result<FeatureMap> {
        let mut g = Graph::inference();
        let fm = self.features(&mut g, store, image)?;
        Ok(FeatureMap { data: g.tensor(fm), stride: self.stride() })
    }

    pub fn roi_align(&self, fm: &FeatureMap, b: &BoxSet) -> RoiFeatures {
        RoiFeatures(crate::autograd::roi_align_forward(&fm.data, &b.0, &self.roi))
    }

    /// Runs stages `0..count` from the learnable initial queries and boxes.
    /// Boxes are detached between stages; the first stage's base boxes are
    /// the learnable proposals.
    pub fn run_stages(&self, g: &mut Graph, store: &ParamStore, fm: Var, count: usize) -> Vec<StageOutput> {
        let mut q = g.param(store, self.init_queries);
        let mut base = g.param(store, self.init_boxes);
        let mut out = Vec::with_capacity(count);
        for stage in &self.stages[..count] {
            let b = g.tensor(base);
            q = stage.update(g, store, fm, q, &b, &self.roi);
            let (logits, boxes) = stage.predict(g, store, q, base);
            out.push(StageOutput { queries: q, logits, boxes });
            base = g.constant(g.tensor(boxes));
        }
        out
    }
}

/// Loss terms of a detection (summed over stages when deep supervision applies).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
    pub total: f64,
    /// `(query_index, gt_index)` pairs of the last supervised stage.
    pub matching: Vec<(usize, usize)>,
}

impl LossBreakdown {
    pub fn accumulate(&mut self, other: &LossBreakdown) {
        self.cls += other.cls;
        self.l1 += other.l1;
        self.giou += other.giou;
        self.total += other.total;
        self.matching.clone_from(&other.matching);
    }
}

/// Matching costs and loss weights for set prediction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SetCriterion {
    pub num_classes: usize,
    pub alpha: f64,
    pub gamma: f64,
    pub w_cls: f64,
    pub w_l1: f64,
    pub w_giou: f64,
}

impl SetCriterion {
    pub fn from_config(cfg: &ModelConfig, num_classes: usize) -> Self {
        Self {
            num_classes,
            alpha: cfg.focal_alpha,
            gamma: cfg.focal_gamma,
            w_cls: cfg.cost_class,
            w_l1: cfg.cost_l1,
            w_giou: cfg.cost_giou,
        }
    }

    /// Cost matrix `[gt][query]`.
    pub fn cost_matrix(&self, logits: &Tensor, pred: &Tensor, gt: &[ObjectAnnotation]) -> Vec<Vec<f64>> {
        gt.iter()
            .map(|a| {
                let gb = boxes::cxcywh_to_xyxy(&a.bbox);
                (0..pred.rows())
                    .map(|q| {
                        let p = crate::autograd::sigmoid(logits.row(q)[a.class_id]);
                        let neg = (1.0 - self.alpha) * p.powf(self.gamma) * -(1.0 - p + 1e-8).ln();
                        let pos = self.alpha * (1.0 - p).powf(self.gamma) * -(p + 1e-8).ln();
                        let pb = pred.row(q);
                        let l1: f64 = pb.iter().zip(&a.bbox).map(|(x, y)| (x - y).abs()).sum();
                        let giou = boxes::giou_xyxy(&boxes::cxcywh_to_xyxy(pb), &gb);
                        self.w_cls * (pos - neg) + self.w_l1 * l1 - self.w_giou * giou
                    })
                    .collect()
            })
            .collect()
    }

    /// Optimal `(query, gt)` assignment.
    pub fn match_predictions(&self, logits: &Tensor, pred: &Tensor, gt: &[ObjectAnnotation]) -> Vec<(usize, usize)> {
        let cost = self.cost_matrix(logits, pred, gt);
        let mut m: Vec<(usize, usize)> = hungarian(&cost).into_iter().map(|(gi, q)| (q, gi)).collect();
        m.sort_unstable();
        m
    }

    /// Loss of one stage's predictions. Terms are normalized by the number
    /// of ground-truth objects (at least one).
    pub fn stage_loss(&self, g: &mut Graph, logits: Var, pred: Var, gt: &[ObjectAnnotation]) -> (Var, LossBreakdown) {
        let matching = self.match_predictions(g.value(logits), g.value(pred), gt);
        let norm = 1.0 / gt.len().max(1) as f64;
        let mut targets = Tensor::zeros(g.shape(logits));
        for &(q, gi) in &matching {
            targets.row_mut(q)[gt[gi].class_id] = 1.0;
        }
        let cls = g.focal_loss(logits, &targets, self.alpha, self.gamma);
        let cls = g.scale(cls, norm);
        let mut parts = vec![g.scale(cls, self.w_cls)];
        let mut bd = LossBreakdown { cls: g.value(cls).item(), ..Default::default() };
        if !matching.is_empty() {
            let qi: Vec<usize> = matching.iter().map(|m| m.0).collect();
            let tb = Tensor::from_rows(&matching.iter().map(|m| gt[m.1].bbox.to_vec()).collect::<Vec<_>>(), 4);
            let sel = g.gather_rows(pred, &qi);
            let l1 = g.l1_loss(sel, &tb);
            let l1 = g.scale(l1, norm);
            let gi = g.giou_loss(sel, &tb);
            let gi = g.scale(gi, norm);
            bd.l1 = g.value(l1).item();
            bd.giou = g.value(gi).item();
            parts.push(g.scale(l1, self.w_l1));
            parts.push(g.scale(gi, self.w_giou));
        }
        let total = g.add_all(&parts);
        bd.total = g.value(total).item();
        bd.matching = matching;
        (total, bd)
    }

    /// Deep supervision: the stage losses summed.
    pub fn match_and_loss(&self, g: &mut Graph, preds: &[(Var, Var)], gt: &[ObjectAnnotation]) -> (Var, LossBreakdown) {
        let mut parts = Vec::with_capacity(preds.len());
        let mut bd = LossBreakdown::default();
        for &(logits, boxes) in preds {
            let (v, b) = self.stage_loss(g, logits, boxes, gt);
            parts.push(v);
            bd.accumulate(&b);
        }
        (g.add_all(&parts), bd)
    }
}

/// Minimum-cost assignment for a rectangular cost matrix `[rows][cols]`.
/// Returns `min(rows, cols)` pairs `(row, col)` sorted by row.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<(usize, usize)> {
    let rows = cost.len();
    if rows == 0 || cost[0].is_empty() {
        return Vec::new();
    }
    let cols = cost[0].len();
    if rows > cols {
        let t: Vec<Vec<f64>> = (0..cols).map(|c| (0..rows).map(|r| cost[r][c]).collect()).collect();
        let mut m: Vec<(usize, usize)> = hungarian(&t).into_iter().map(|(c, r)| (r, c)).collect();
        m.sort_unstable();
        return m;
    }
    // Shortest augmenting paths with potentials; 1-based with a virtual column 0.
    let (n, m) = (rows, cols);
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out: Vec<(usize, usize)> = (1..=m).filter(|&j| p[j] != 0).map(|j| (p[j] - 1, j - 1)).collect();
    out.sort_unstable();
    out
}
