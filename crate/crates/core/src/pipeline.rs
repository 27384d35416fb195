//! Online per-video inference: gate, key head with temporal memory, or
//! the light non-key head, one frame at a time.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::config::{Config, MemoryConfig, SchedulerMode};
use crate::detector::{BoxSet, FeatureMap, ScoreSet};
use crate::error::Result;
use crate::gate::{gate_decide, GateDecision};
use crate::model::QueryPropModel;
use crate::propagation::{nonkey_detect, PropagationState, PropagationVariant};
use crate::synthdata::VideoSample;
use crate::temporal_memory::{MemoryInputs, MemoryStore};
use crate::tensor::Tensor;

/// Inference-time behaviour. Everything that differs between ablation rows
/// lives here; the weights are shared.
#[derive(Clone, Debug, PartialEq)]
pub struct RunOptions {
    pub scheduler: SchedulerMode,
    pub interval: usize,
    pub threshold: f64,
    pub max_interval: usize,
    pub variant: PropagationVariant,
    pub memory: MemoryConfig,
    pub seed: u64,
    /// Record wall time. Off in deterministic mode so reports are reproducible.
    pub timing: bool,
}

impl RunOptions {
    pub fn from_config(cfg: &Config) -> Self {
        Self {
            scheduler: cfg.scheduler.mode,
            interval: cfg.scheduler.interval,
            threshold: cfg.gate.threshold,
            max_interval: cfg.gate.max_interval,
            variant: cfg.propagation.variant,
            memory: cfg.memory.clone(),
            seed: cfg.seed,
            timing: true,
        }
    }
}

pub struct VideoState {
    pub prop: Option<PropagationState>,
    pub mem: MemoryStore,
    pub frames_since_key: usize,
    pub frame_index: usize,
    rng: ChaCha8Rng,
}

impl VideoState {
    pub fn new(opts: &RunOptions, video_seed: u64) -> Self {
        let seed = opts.seed ^ video_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        Self {
            prop: None,
            mem: MemoryStore::new(&opts.memory),
            frames_since_key: 0,
            frame_index: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameTrace {
    pub frame_index: usize,
    pub is_key: bool,
    pub gate_prob: Option<f64>,
    pub head_stages_evaluated: usize,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameDetections {
    pub scores: ScoreSet,
    pub boxes: BoxSet,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub frames: usize,
    pub key_frames: usize,
    pub mean_key_interval: f64,
    pub total_head_stages: usize,
    pub wall_time_s: f64,
}

impl RunStats {
    pub fn from_traces(traces: &[FrameTrace]) -> Self {
        let key_frames = traces.iter().filter(|t| t.is_key).count();
        Self {
            frames: traces.len(),
            key_frames,
            mean_key_interval: if key_frames == 0 { 0.0 } else { traces.len() as f64 / key_frames as f64 },
            total_head_stages: traces.iter().map(|t| t.head_stages_evaluated).sum(),
            wall_time_s: traces.iter().map(|t| t.wall_time_s).sum(),
        }
    }
}

pub struct VideoRun {
    pub detections: Vec<FrameDetections>,
    pub traces: Vec<FrameTrace>,
    pub stats: RunStats,
}

/// One line of the detections file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub video_id: String,
    pub frame: usize,
    pub boxes: Vec<[f64; 4]>,
    pub scores: Vec<f64>,
    pub classes: Vec<usize>,
    pub is_key: bool,
    pub gate_prob: Option<f64>,
}

impl DetectionRecord {
    pub fn new(video_id: &str, det: &FrameDetections, trace: &FrameTrace) -> Self {
        let best = det.scores.best();
        Self {
            video_id: video_id.to_string(),
            frame: trace.frame_index,
            boxes: (0..det.boxes.0.rows()).map(|i| det.boxes.0.row(i).try_into().expect("4-vector")).collect(),
            scores: best.iter().map(|&(_, p)| p).collect(),
            classes: best.iter().map(|&(c, _)| c).collect(),
            is_key: trace.is_key,
            gate_prob: trace.gate_prob,
        }
    }
}

fn wants_key(opts: &RunOptions, state: &VideoState, model: &QueryPropModel, fm: &FeatureMap) -> Result<(bool, Option<f64>)> {
    let Some(prop) = &state.prop else { return Ok((true, None)) };
    let since = state.frames_since_key;
    Ok(match opts.scheduler {
        SchedulerMode::AlwaysKey => (true, None),
        SchedulerMode::Fixed => (since >= opts.interval, None),
        SchedulerMode::Adaptive => {
            let p = model.gate.gate_forward(&model.store, &prop.key_features, fm)?;
            let key = gate_decide(p, opts.threshold) == GateDecision::NewKey || since >= opts.max_interval;
            (key, Some(p))
        }
    })
}

/// Key-frame detection; updates memory when enabled. Returns
/// `(scores, boxes, enhanced queries, interactions)`.
pub fn key_detect(
    model: &QueryPropModel,
    fm: &FeatureMap,
    mem: &mut MemoryStore,
    use_memory: bool,
    rng: &mut ChaCha8Rng,
) -> (ScoreSet, BoxSet, Tensor, usize) {
    let mut g = Graph::inference();
    let f = g.constant(fm.data.clone());
    let inputs = if use_memory { mem.inputs(rng) } else { MemoryInputs::default() };
    let out = model.key_forward(&mut g, f, &inputs);
    let scores = ScoreSet::from_logits(g.value(out.tqe.logits));
    let boxes = g.tensor(out.tqe.boxes);
    if use_memory {
        mem.update(g.value(out.tqe.q6), &scores, &boxes);
    }
    (scores, BoxSet(boxes), g.tensor(out.tqe.enhanced), g.interactions())
}

/// Processes the next frame of a video and advances `state`.
pub fn process_frame(
    model: &QueryPropModel,
    opts: &RunOptions,
    state: &mut VideoState,
    image: &Tensor,
) -> Result<(FrameDetections, FrameTrace)> {
    let start = Instant::now();
    let fm = model.detector.extract_features(&model.store, image)?;
    let (is_key, gate_prob) = wants_key(opts, state, model, &fm)?;
    let (scores, boxes, stages) = if is_key {
        let (scores, boxes, q, n) = key_detect(model, &fm, &mut state.mem, opts.memory.enabled, &mut state.rng);
        state.prop = Some(PropagationState::from_key(q, boxes.0.clone(), fm));
        state.frames_since_key = 0;
        (scores, boxes, n)
    } else {
        let prop = state.prop.as_mut().expect("non-key frames follow a key frame");
        let (scores, boxes, _, n) = nonkey_detect(&model.store, &model.detector, model.head(opts.variant), &fm, prop);
        prop.prev_boxes = boxes.clone();
        (scores, boxes, n)
    };
    let trace = FrameTrace {
        frame_index: state.frame_index,
        is_key,
        gate_prob,
        head_stages_evaluated: stages,
        wall_time_s: if opts.timing { start.elapsed().as_secs_f64() } else { 0.0 },
    };
    state.frame_index += 1;
    state.frames_since_key += 1;
    Ok((FrameDetections { scores, boxes }, trace))
}

/// Runs a whole video online, frame by frame.
pub fn run_video(model: &QueryPropModel, opts: &RunOptions, video: &VideoSample) -> Result<VideoRun> {
    let mut state = VideoState::new(opts, video.meta.seed);
    let mut detections = Vec::with_capacity(video.len());
    let mut traces = Vec::with_capacity(video.len());
    for frame in &video.frames {
        let (d, t) = process_frame(model, opts, &mut state, &frame.to_tensor())?;
        detections.push(d);
        traces.push(t);
    }
    let stats = RunStats::from_traces(&traces);
    Ok(VideoRun { detections, traces, stats })
}
