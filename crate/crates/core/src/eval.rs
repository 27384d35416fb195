//! mAP@IoU evaluation, run profiling and evaluation reports.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::boxes::iou;
use crate::config::EvalConfig;
use crate::error::{Error, Result};
use crate::model::QueryPropModel;
use crate::pipeline::{run_video, FrameDetections, FrameTrace, RunOptions, VideoRun};
use crate::synthdata::{ObjectAnnotation, Split, VideoSample, CLASS_NAMES};

/// One scored box in a flat detection list.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub frame: usize,
    pub class_id: usize,
    pub score: f64,
    pub bbox: [f64; 4],
}

/// All (query, class) pairs of a frame scoring at least `score_threshold`.
pub fn flatten_frame(frame: usize, det: &FrameDetections, score_threshold: f64) -> Vec<Detection> {
    let s = &det.scores.0;
    let mut out = Vec::new();
    for q in 0..s.rows() {
        for (c, &p) in s.row(q).iter().enumerate() {
            if p >= score_threshold {
                out.push(Detection { frame, class_id: c, score: p, bbox: det.boxes.0.row(q).try_into().expect("4-vector") });
            }
        }
    }
    out
}

/// All-point interpolated AP from a precision/recall sequence in rank order.
pub fn interpolated_ap(recall: &[f64], precision: &[f64]) -> f64 {
    let mut mrec = vec![0.0];
    mrec.extend_from_slice(recall);
    mrec.push(1.0);
    let mut mpre = vec![0.0];
    mpre.extend_from_slice(precision);
    mpre.push(0.0);
    for i in (0..mpre.len() - 1).rev() {
        mpre[i] = mpre[i].max(mpre[i + 1]);
    }
    (1..mrec.len()).filter(|&i| mrec[i] != mrec[i - 1]).map(|i| (mrec[i] - mrec[i - 1]) * mpre[i]).sum()
}

/// AP of one class. `dets` are ranked by descending score (stable), then
/// matched greedily: each detection takes its highest-IoU ground truth in the
/// same frame, and counts as a true positive if that overlap reaches
/// `iou_thr` and the ground truth is still unclaimed.
pub fn average_precision(dets: &[Detection], gts: &[Vec<[f64; 4]>], iou_thr: f64) -> f64 {
    let npos: usize = gts.iter().map(Vec::len).sum();
    if npos == 0 {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut claimed: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let (mut tp, mut fp) = (0usize, 0usize);
    let (mut recall, mut precision) = (Vec::with_capacity(dets.len()), Vec::with_capacity(dets.len()));
    for &i in &order {
        let d = &dets[i];
        let best = gts[d.frame].iter().enumerate().map(|(j, g)| (j, iou(&d.bbox, g))).fold(None, |acc: Option<(usize, f64)>, (j, o)| match acc {
            Some((_, bo)) if bo >= o => acc,
            _ => Some((j, o)),
        });
        match best {
            Some((j, o)) if o >= iou_thr && !claimed[d.frame][j] => {
                claimed[d.frame][j] = true;
                tp += 1;
            }
            _ => fp += 1,
        }
        recall.push(tp as f64 / npos as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    interpolated_ap(&recall, &precision)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapResult {
    pub map: f64,
    /// AP of every class that occurs in the ground truth.
    pub per_class: BTreeMap<usize, f64>,
}

/// mAP over frame-aligned detections and annotations. Classes without
/// ground truth are left out of the mean; no ground truth at all gives 0.
pub fn evaluate_map(dets: &[Vec<Detection>], gts: &[Vec<ObjectAnnotation>], num_classes: usize, iou_thr: f64) -> Result<MapResult> {
    if dets.len() != gts.len() {
        return Err(Error::Shape(format!("{} detection frames vs {} annotated frames", dets.len(), gts.len())));
    }
    let mut per_class = BTreeMap::new();
    for c in 0..num_classes {
        let g: Vec<Vec<[f64; 4]>> = gts.iter().map(|f| f.iter().filter(|a| a.class_id == c).map(|a| a.bbox).collect()).collect();
        if g.iter().all(Vec::is_empty) {
            continue;
        }
        let d: Vec<Detection> = dets.iter().flatten().filter(|d| d.class_id == c).copied().collect();
        per_class.insert(c, average_precision(&d, &g, iou_thr));
    }
    let map = if per_class.is_empty() { 0.0 } else { per_class.values().sum::<f64>() / per_class.len() as f64 };
    Ok(MapResult { map, per_class })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileSummary {
    pub frames: usize,
    pub key_frames: usize,
    pub key_rate: f64,
    pub mean_key_interval: f64,
    pub stages_per_frame: f64,
    pub wall_time_s: f64,
    pub frames_per_second: f64,
    pub note: String,
}

pub fn profile_run(traces: &[FrameTrace]) -> Result<ProfileSummary> {
    if traces.is_empty() {
        return Err(Error::Config("profile of an empty run".into()));
    }
    let n = traces.len();
    let keys = traces.iter().filter(|t| t.is_key).count();
    let stages: usize = traces.iter().map(|t| t.head_stages_evaluated).sum();
    let wall: f64 = traces.iter().map(|t| t.wall_time_s).sum();
    Ok(ProfileSummary {
        frames: n,
        key_frames: keys,
        key_rate: keys as f64 / n as f64,
        mean_key_interval: if keys == 0 { 0.0 } else { n as f64 / keys as f64 },
        stages_per_frame: stages as f64 / n as f64,
        wall_time_s: wall,
        frames_per_second: if wall > 0.0 { n as f64 / wall } else { 0.0 },
        note: "wall-time figures are machine-dependent".into(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub map_at_50: f64,
    pub per_class_ap: BTreeMap<String, f64>,
    /// mAP restricted to each test split present.
    pub split_map: BTreeMap<String, f64>,
    pub mean_key_interval: f64,
    pub mean_head_stages_per_frame: f64,
    pub frames_per_second: f64,
    pub config_digest: String,
}

fn class_name(c: usize) -> String {
    CLASS_NAMES.get(c).map_or_else(|| format!("class_{c}"), |s| s.to_string())
}

/// Runs every video online with `opts` and scores the detections.
pub fn evaluate_videos(
    model: &QueryPropModel,
    opts: &RunOptions,
    videos: &[&VideoSample],
    eval: &EvalConfig,
    config_digest: &str,
) -> Result<(EvalReport, Vec<VideoRun>)> {
    let runs: Vec<VideoRun> = videos.iter().map(|v| run_video(model, opts, v)).collect::<Result<_>>()?;
    let k = model.config.data.num_classes;
    let score = |sel: &dyn Fn(&VideoSample) -> bool| -> Result<MapResult> {
        let mut dets = Vec::new();
        let mut gts = Vec::new();
        for (v, r) in videos.iter().zip(&runs).filter(|(v, _)| sel(v)) {
            for (f, d) in r.detections.iter().enumerate() {
                dets.push(flatten_frame(gts.len(), d, eval.score_threshold));
                gts.push(v.annotations[f].clone());
            }
        }
        evaluate_map(&dets, &gts, k, eval.iou_threshold)
    };
    let all = score(&|_| true)?;
    let mut split_map = BTreeMap::new();
    for split in [Split::TestClean, Split::TestDegraded] {
        if videos.iter().any(|v| v.meta.split == split) {
            split_map.insert(split.tag().to_string(), score(&|v| v.meta.split == split)?.map);
        }
    }
    let traces: Vec<FrameTrace> = runs.iter().flat_map(|r| r.traces.iter().cloned()).collect();
    let prof = profile_run(&traces)?;
    let report = EvalReport {
        map_at_50: all.map,
        per_class_ap: all.per_class.iter().map(|(&c, &ap)| (class_name(c), ap)).collect(),
        split_map,
        mean_key_interval: prof.mean_key_interval,
        mean_head_stages_per_frame: prof.stages_per_frame,
        frames_per_second: prof.frames_per_second,
        config_digest: config_digest.to_string(),
    };
    Ok((report, runs))
}
