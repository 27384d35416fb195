//! Two-stage training: the detector (backbone, key head, TQE relations and
//! non-key heads) first, then the gate with the detector frozen.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use log::info;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{GradMode, Graph};
use crate::config::{LabelLoss, MemoryConfig};
use crate::detector::{FeatureMap, LossBreakdown, SetCriterion};
use crate::error::{Error, Result};
use crate::gate::{gate_loss, pseudo_labels};
use crate::model::{QueryPropModel, GATE_PREFIX};
use crate::params::{ParamId, ParamStore};
use crate::pipeline::key_detect;
use crate::propagation::{nonkey_detect, PropagationState, PropagationVariant};
use crate::synthdata::VideoSample;
use crate::temporal_memory::{MemoryInputs, MemoryStore};
use crate::tensor::Tensor;

/// Frame indices used by one training step, all from one video.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipSample {
    pub key_frame: usize,
    pub nonkey_frame: usize,
    pub short_mem_frames: [usize; 2],
    pub long_mem_frames: [usize; 2],
    pub tau: usize,
}

impl ClipSample {
    /// Every slot holds `frame`: the still-image form of a clip.
    pub fn image_only(frame: usize, tau: usize) -> Self {
        Self { key_frame: frame, nonkey_frame: frame, short_mem_frames: [frame; 2], long_mem_frames: [frame; 2], tau }
    }

    pub fn frames(&self) -> [usize; 6] {
        let [s0, s1] = self.short_mem_frames;
        let [l0, l1] = self.long_mem_frames;
        [self.key_frame, self.nonkey_frame, s0, s1, l0, l1]
    }
}

/// Inclusive index range for short-term memory frames of key frame `k`:
/// `[k - 3τ, k - τ]`, clamped at the start of the video.
pub fn short_memory_range(k: usize, tau: usize) -> (usize, usize) {
    let hi = if k >= tau { k - tau } else { k.saturating_sub(1) };
    (k.saturating_sub(3 * tau).min(hi), hi)
}

/// Draws a clip from a video of `len` frames. The non-key frame lies
/// `1..=max_offset` frames after the key frame.
pub fn sample_training_clip(len: usize, rng: &mut impl Rng, tau: usize, max_offset: usize) -> Result<ClipSample> {
    if len < 2 {
        return Err(Error::Config(format!("training clips need videos of at least 2 frames, got {len}")));
    }
    let k = rng.gen_range(0..len - 1);
    let off = rng.gen_range(1..=max_offset.max(1).min(len - 1 - k));
    let (lo, hi) = short_memory_range(k, tau);
    let mut short = [rng.gen_range(lo..=hi), rng.gen_range(lo..=hi)];
    let mut long = [rng.gen_range(0..=k), rng.gen_range(0..=k)];
    short.sort_unstable();
    long.sort_unstable();
    Ok(ClipSample { key_frame: k, nonkey_frame: k + off, short_mem_frames: short, long_mem_frames: long, tau })
}

/// Learning rate at `step`: `base` times 0.1 for every milestone passed.
pub fn lr_at(base: f64, step: usize, total: usize, milestones: &[f64]) -> f64 {
    let passed = milestones.iter().filter(|&&m| step as f64 >= (m * total as f64).round()).count();
    base * 0.1f64.powi(passed as i32)
}

/// Adam with decoupled weight decay on matrices and kernels (rank >= 2).
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, m: zeros.clone(), v: zeros, t: 0 }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &HashMap<ParamId, Tensor>, lr: f64) {
        self.t += 1;
        let (c1, c2) = (1.0 - self.beta1.powi(self.t), 1.0 - self.beta2.powi(self.t));
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let Some(g) = grads.get(&id) else { continue };
            let i = id.index();
            let decay = if store.get(id).rank() >= 2 { self.weight_decay } else { 0.0 };
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let p = store.get_mut(id).data_mut();
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g.data()[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g.data()[j] * g.data()[j];
                let upd = (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
                p[j] -= lr * (upd + decay * p[j]);
            }
        }
    }
}

/// Scales gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(store: &ParamStore, grads: &mut HashMap<ParamId, Tensor>, max_norm: f64) -> f64 {
    // store order keeps the sum reproducible
    let norm = store.ids().filter_map(|id| grads.get(&id)).map(|g| g.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub key_cls: f64,
    pub key_l1: f64,
    pub key_giou: f64,
    pub nonkey: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: Vec<StepLog>,
}

impl TrainReport {
    /// Mean total loss over the step range `[from, to)`.
    pub fn mean_loss(&self, from: usize, to: usize) -> f64 {
        let s = &self.steps[from.min(self.steps.len())..to.min(self.steps.len())];
        s.iter().map(|l| l.loss).sum::<f64>() / s.len().max(1) as f64
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("step,loss,key_cls,key_l1,key_giou,nonkey,lr\n");
        for s in &self.steps {
            out.push_str(&format!("{},{},{},{},{},{},{}\n", s.step, s.loss, s.key_cls, s.key_l1, s.key_giou, s.nonkey, s.lr));
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Builds the transient memory of a clip: the long frames enter first and
/// are pushed out into the long pool by the two short frames.
fn clip_memory(model: &QueryPropModel, video: &VideoSample, clip: &ClipSample, rng: &mut ChaCha8Rng) -> Result<MemoryInputs> {
    let cfg = MemoryConfig { short_frames: 2, ..model.config.memory.clone() };
    let mut mem = MemoryStore::new(&cfg);
    for &f in clip.long_mem_frames.iter().chain(&clip.short_mem_frames) {
        let fm = model.detector.extract_features(&model.store, &video.frames[f].to_tensor())?;
        let mut g = Graph::inference();
        let x = g.constant(fm.data);
        let out = model.key_forward(&mut g, x, &MemoryInputs::default());
        let scores = crate::detector::ScoreSet::from_logits(g.value(out.tqe.logits));
        mem.update(g.value(out.tqe.q6), &scores, g.value(out.tqe.boxes));
    }
    Ok(MemoryInputs { short: mem.short_term(), long: mem.sample_long_term(rng) })
}

/// Box chain of variant d from the key frame up to (excluding) frame `t`.
fn chain_boxes(model: &QueryPropModel, video: &VideoSample, key: usize, t: usize, state: &mut PropagationState) -> Result<()> {
    let head = model.head(PropagationVariant::D);
    for f in key + 1..t {
        let fm = model.detector.extract_features(&model.store, &video.frames[f].to_tensor())?;
        let (_, b, _, _) = nonkey_detect(&model.store, &model.detector, head, &fm, state);
        state.prev_boxes = b;
    }
    Ok(())
}

/// Stage 1. Trains every detector parameter on clips drawn from `videos`.
/// With memory disabled in the config the TQE head always sees empty memory.
pub fn train_stage1(model: &mut QueryPropModel, videos: &[&VideoSample], seed: u64) -> Result<TrainReport> {
    if videos.is_empty() {
        return Err(Error::Config("training needs at least one video".into()));
    }
    let tc = model.config.training.clone();
    let criterion = SetCriterion::from_config(&model.config.model, model.config.data.num_classes);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = AdamW::new(&model.store, tc.weight_decay);
    let mut report = TrainReport::default();
    for step in 0..tc.steps {
        let video = videos[rng.gen_range(0..videos.len())];
        let clip = sample_training_clip(video.len(), &mut rng, tc.tau, tc.max_offset)?;
        let use_mem = model.config.memory.enabled && rng.gen::<f64>() >= tc.empty_memory_prob;
        let mem = if use_mem { clip_memory(model, video, &clip, &mut rng)? } else { MemoryInputs::default() };
        let (k, t) = (clip.key_frame, clip.nonkey_frame);

        let mut g = Graph::training();
        let store = &model.store;
        let fk = model.detector.features(&mut g, store, &video.frames[k].to_tensor())?;
        let key = model.key_forward(&mut g, fk, &mem);
        let (key_loss, key_bd) = criterion.match_and_loss(&mut g, &key.predictions(), &video.annotations[k]);

        let key_b = g.tensor(key.tqe.boxes);
        let mut state = PropagationState::from_key(g.tensor(key.tqe.enhanced), key_b.clone(), FeatureMap { data: g.tensor(fk), stride: model.detector.stride() });
        if tc.variants.contains(&PropagationVariant::D) {
            chain_boxes(model, video, k, t, &mut state)?;
        }
        let ft = model.detector.features(&mut g, store, &video.frames[t].to_tensor())?;
        // non-key losses are averaged over the jointly trained heads, so the
        // key head sees the same key/non-key balance as with a single head
        let w = 1.0 / tc.variants.len() as f64;
        let mut parts = vec![key_loss];
        let mut nonkey = 0.0;
        for &v in &tc.variants {
            let out = model.head(v).forward(&mut g, store, &model.detector, ft, key.tqe.enhanced, &key_b, &state.prev_boxes.0);
            let (l, bd) = criterion.stage_loss(&mut g, out.logits, out.boxes, &video.annotations[t]);
            parts.push(g.scale(l, w));
            nonkey += w * bd.total;
        }
        let total = g.add_all(&parts);
        let loss = g.value(total).item();
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        let mut grads = g.backward(total).into_params();
        drop(g);
        clip_grad_norm(&model.store, &mut grads, tc.grad_clip);
        let lr = lr_at(tc.lr, step, tc.steps, &tc.milestones);
        opt.step(&mut model.store, &grads, lr);
        report.steps.push(StepLog { step, loss, key_cls: key_bd.cls, key_l1: key_bd.l1, key_giou: key_bd.giou, nonkey, lr });
        if tc.log_every > 0 && (step + 1) % tc.log_every == 0 {
            let from = (step + 1).saturating_sub(tc.log_every);
            info!("step {:>5}  loss {:.4}  lr {:.2e}", step + 1, report.mean_loss(from, step + 1), lr);
        }
    }
    Ok(report)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GateReport {
    /// Gate BCE per step.
    pub losses: Vec<f64>,
    /// Fraction of positive pseudo-labels.
    pub positive_rate: f64,
    pub detector_checksum_before: String,
    pub detector_checksum_after: String,
}

impl GateReport {
    /// Mean loss over the first and last tenth of the run.
    pub fn initial_and_final(&self) -> (f64, f64) {
        let n = self.losses.len();
        let w = (n / 10).max(1);
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len().max(1) as f64;
        (mean(&self.losses[..w.min(n)]), mean(&self.losses[n.saturating_sub(w)..]))
    }
}

/// Detection loss terms at `anchor` when `candidate` is the key frame and the
/// configured variant propagates to it.
pub fn propagated_loss(
    model: &QueryPropModel,
    criterion: &SetCriterion,
    video: &VideoSample,
    feats: &HashMap<usize, FeatureMap>,
    candidate: usize,
    anchor: usize,
    rng: &mut ChaCha8Rng,
) -> LossBreakdown {
    let variant = model.config.propagation.variant;
    let fm = &feats[&candidate];
    let mut scratch = MemoryStore::new(&model.config.memory);
    let (_, boxes, q, _) = key_detect(model, fm, &mut scratch, false, rng);
    let mut state = PropagationState::from_key(q, boxes.0, fm.clone());
    let head = model.head(variant);
    if variant == PropagationVariant::D {
        for f in candidate + 1..anchor {
            let (_, b, _, _) = nonkey_detect(&model.store, &model.detector, head, &feats[&f], &state);
            state.prev_boxes = b;
        }
    }
    let mut g = Graph::inference();
    let x = g.constant(feats[&anchor].data.clone());
    let q = g.constant(state.key_queries.0.clone());
    let out = head.forward(&mut g, &model.store, &model.detector, x, q, &state.key_boxes.0, &state.prev_boxes.0);
    criterion.stage_loss(&mut g, out.logits, out.boxes, &video.annotations[anchor]).1
}

/// Stage 2. Only `gate.*` parameters change; the detector checksum is
/// verified before returning.
pub fn train_stage2_gate(model: &mut QueryPropModel, videos: &[&VideoSample], seed: u64) -> Result<GateReport> {
    if videos.is_empty() {
        return Err(Error::Config("gate training needs at least one video".into()));
    }
    let gc = model.config.gate.clone();
    let criterion = SetCriterion::from_config(&model.config.model, model.config.data.num_classes);
    let mask: Vec<bool> = model.store.iter().map(|(_, n, _)| n.starts_with(GATE_PREFIX)).collect();
    let mask = Arc::new(mask);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = AdamW::new(&model.store, 0.0);
    let before = model.detector_checksum();
    let mut report = GateReport { detector_checksum_before: before.clone(), ..Default::default() };
    let (mut positives, mut labelled) = (0usize, 0usize);
    for step in 0..gc.steps {
        let video = videos[rng.gen_range(0..videos.len())];
        if video.len() < 2 {
            continue;
        }
        let anchor = rng.gen_range(1..video.len());
        let lo = anchor.saturating_sub(gc.window.max(1));
        let count = anchor - lo;
        let mut cands: Vec<usize> = sample(&mut rng, count, gc.m.min(count)).into_iter().map(|i| lo + i).collect();
        cands.sort_unstable();
        let first = cands[0];
        let mut feats = HashMap::new();
        for f in first..=anchor {
            feats.insert(f, model.detector.extract_features(&model.store, &video.frames[f].to_tensor())?);
        }
        let losses: Vec<f64> = cands
            .iter()
            .map(|&c| {
                let bd = propagated_loss(model, &criterion, video, &feats, c, anchor, &mut rng);
                match gc.label_loss {
                    LabelLoss::Cls => bd.cls,
                    LabelLoss::Total => bd.total,
                }
            })
            .collect();
        let labels = pseudo_labels(&losses, gc.beta);
        positives += labels.iter().filter(|&&y| y > 0.5).count();
        labelled += labels.len();

        let mut g = Graph::new(GradMode::Mask(mask.clone()));
        let xt = g.constant(feats[&anchor].data.clone());
        let logits: Vec<_> = cands
            .iter()
            .map(|c| {
                let xk = g.constant(feats[c].data.clone());
                model.gate.logit(&mut g, &model.store, xk, xt)
            })
            .collect();
        let logits = g.concat_rows(&logits);
        let logits = g.reshape(logits, &[cands.len()]);
        let loss = gate_loss(&mut g, logits, &labels);
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Diverged { step, loss: value });
        }
        let grads = g.backward(loss).into_params();
        drop(g);
        opt.step(&mut model.store, &grads, gc.lr);
        report.losses.push(value);
        if (step + 1) % 100 == 0 {
            let n = report.losses.len();
            info!("gate step {:>5}  bce {:.4}", step + 1, report.losses[n.saturating_sub(100)..].iter().sum::<f64>() / 100f64.min(n as f64));
        }
    }
    report.positive_rate = positives as f64 / labelled.max(1) as f64;
    report.detector_checksum_after = model.detector_checksum();
    assert_eq!(before, report.detector_checksum_after, "gate training modified detector parameters");
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;
    use crate::synthdata::{generate_video, DegradationSpec, GenConfig};
    use proptest::prelude::*;

    #[test]
    fn short_range_examples() {
        assert_eq!(short_memory_range(30, 5), (15, 25));
        assert_eq!(short_memory_range(2, 5), (0, 1));
        assert_eq!(short_memory_range(0, 3), (0, 0));
    }

    #[test]
    fn image_only_repeats_frame() {
        let c = ClipSample::image_only(4, 3);
        assert_eq!(c.frames(), [4; 6]);
    }

    #[test]
    fn lr_steps_down_at_milestones() {
        let m = [0.7, 0.9];
        assert_eq!(lr_at(1.0, 0, 100, &m), 1.0);
        assert_eq!(lr_at(1.0, 69, 100, &m), 1.0);
        assert!((lr_at(1.0, 70, 100, &m) - 0.1).abs() < 1e-15);
        assert!((lr_at(1.0, 95, 100, &m) - 0.01).abs() < 1e-15);
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::new(&[2], vec![1.0, -1.0]));
        let mut opt = AdamW::new(&store, 0.0);
        let grads = HashMap::from([(id, Tensor::new(&[2], vec![0.3, -5.0]))]);
        opt.step(&mut store, &grads, 0.1);
        let p = store.get(id).data();
        assert!((p[0] - 0.9).abs() < 1e-6 && (p[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::zeros(&[2]));
        let mut grads = HashMap::from([(id, Tensor::new(&[2], vec![3.0, 4.0]))]);
        assert_eq!(clip_grad_norm(&store, &mut grads, 1.0), 5.0);
        assert!((grads[&id].data()[0] - 0.6).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn clips_stay_inside_the_video(len in 2usize..80, tau in 1usize..8, off in 1usize..15, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = sample_training_clip(len, &mut rng, tau, off).unwrap();
            prop_assert!(c.frames().iter().all(|&f| f < len));
            prop_assert!(c.nonkey_frame > c.key_frame && c.nonkey_frame - c.key_frame <= off);
            let (lo, hi) = short_memory_range(c.key_frame, tau);
            prop_assert!(c.short_mem_frames.iter().all(|&f| (lo..=hi).contains(&f)));
            prop_assert!(c.long_mem_frames.iter().all(|&f| f <= c.key_frame));
        }
    }

    fn tiny_setup(steps: usize) -> (QueryPropModel, Vec<VideoSample>) {
        let mut cfg = Config::tiny();
        cfg.training.steps = steps;
        cfg.training.lr = 1e-3;
        cfg.training.variants = PropagationVariant::ALL.to_vec();
        cfg.gate.steps = steps;
        cfg.gate.m = 3;
        cfg.gate.window = 4;
        let mut gen = GenConfig::from_data(&cfg.data, DegradationSpec::none());
        gen.length = 8;
        let videos = (0..2).map(|s| generate_video(&gen, s).unwrap()).collect();
        (QueryPropModel::new(&cfg), videos)
    }

    #[test]
    fn stage1_is_reproducible_and_finite() {
        let (model, videos) = tiny_setup(6);
        let refs: Vec<&VideoSample> = videos.iter().collect();
        let (mut a, mut b) = (model.clone(), model.clone());
        let ra = train_stage1(&mut a, &refs, 5).unwrap();
        let rb = train_stage1(&mut b, &refs, 5).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(a.detector_checksum(), b.detector_checksum());
        assert_ne!(a.detector_checksum(), model.detector_checksum());
        assert_eq!(a.gate_checksum(), model.gate_checksum());
        assert!(ra.steps.iter().all(|s| s.loss.is_finite()));
    }

    #[test]
    fn stage2_touches_only_the_gate() {
        let (mut model, videos) = tiny_setup(4);
        let refs: Vec<&VideoSample> = videos.iter().collect();
        let gate_before = model.gate_checksum();
        let r = train_stage2_gate(&mut model, &refs, 1).unwrap();
        assert_eq!(r.detector_checksum_before, r.detector_checksum_after);
        assert_ne!(model.gate_checksum(), gate_before);
        assert_eq!(r.losses.len(), 4);
    }
}
