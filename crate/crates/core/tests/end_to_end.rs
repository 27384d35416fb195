//! Tiny end-to-end run through the public API: data, both training stages,
//! checkpointing, inference and scoring.

use qp_core::ablation::{ablation_suite, Suite, FULL};
use qp_core::checkpoint;
use qp_core::eval::{evaluate_videos, profile_run};
use qp_core::pipeline::{run_video, RunOptions};
use qp_core::synthdata::{generate_dataset, load_dataset, write_dataset, Split};
use qp_core::training::{train_stage1, train_stage2_gate};
use qp_core::{Config, QueryPropModel};
use std::collections::BTreeMap;

fn tiny() -> Config {
    let mut c = Config::tiny();
    c.data.train_videos = 3;
    c.data.test_clean_videos = 1;
    c.data.test_degraded_videos = 1;
    c.data.length = 14;
    c.training.steps = 12;
    c.gate.steps = 4;
    c.gate.m = 3;
    c.gate.window = 6;
    c
}

#[test]
fn train_save_load_and_evaluate() {
    let cfg = tiny();
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_dataset(&cfg.data, cfg.seed).unwrap();
    write_dataset(&ds, dir.path()).unwrap();
    let ds = load_dataset(dir.path()).unwrap();
    let train = ds.split(Split::Train);
    assert_eq!(train.len(), 3);

    let mut model = QueryPropModel::new(&cfg);
    let report = train_stage1(&mut model, &train, cfg.seed).unwrap();
    assert_eq!(report.steps.len(), 12);
    assert!(report.steps.iter().all(|s| s.loss.is_finite()));

    let frozen = model.detector_checksum();
    let gate = train_stage2_gate(&mut model, &train, cfg.seed).unwrap();
    assert_eq!(gate.losses.len(), 4);
    assert_eq!(model.detector_checksum(), frozen);

    let path = dir.path().join("m.safetensors");
    checkpoint::save(&model, &path).unwrap();
    let back = checkpoint::load(&path).unwrap();
    assert_eq!(back.detector_checksum(), model.detector_checksum());
    assert_eq!(back.gate_checksum(), model.gate_checksum());

    let mut opts = RunOptions::from_config(&cfg);
    opts.timing = false;
    let test = ds.test();
    let (a, runs) = evaluate_videos(&model, &opts, &test, &cfg.eval, &cfg.digest()).unwrap();
    let (b, _) = evaluate_videos(&back, &opts, &test, &cfg.eval, &cfg.digest()).unwrap();
    assert_eq!(a, b);
    assert!((0.0..=1.0).contains(&a.map_at_50));
    assert!(a.split_map.contains_key("clean") && a.split_map.contains_key("degraded"));
    let traces: Vec<_> = runs.iter().flat_map(|r| r.traces.clone()).collect();
    let p = profile_run(&traces).unwrap();
    assert_eq!(p.frames, 28);
    assert!(p.stages_per_frame >= 1.0 && p.stages_per_frame <= 6.0);
}

#[test]
fn every_frame_gets_a_detection_slot() {
    let cfg = tiny();
    let ds = generate_dataset(&cfg.data, 4).unwrap();
    let model = QueryPropModel::new(&cfg);
    let opts = RunOptions::from_config(&cfg);
    let v = ds.test()[0];
    let run = run_video(&model, &opts, v).unwrap();
    assert_eq!(run.detections.len(), v.len());
    assert_eq!(run.traces.len(), v.len());
    assert!(run.traces[0].is_key);
    for d in &run.detections {
        assert_eq!(d.boxes.0.rows(), cfg.model.num_queries);
    }
}

#[test]
fn ablation_with_only_full_weights_is_partial() {
    let cfg = tiny();
    let ds = generate_dataset(&cfg.data, 5).unwrap();
    let models = BTreeMap::from([(FULL.to_string(), QueryPropModel::new(&cfg))]);
    let t = ablation_suite(&ds.test(), &models, Suite::T2, &cfg, false).unwrap();
    assert!(t.is_partial());
    assert!(t.row("both, fixed k=10").is_some());
    assert!(t.row("baseline (6 stages every frame)").is_none());
    let t3 = ablation_suite(&ds.test(), &models, Suite::T3, &cfg, false).unwrap();
    assert!(!t3.is_partial());
}
