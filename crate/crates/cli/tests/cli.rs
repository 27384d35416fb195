//! Exit codes and output files of the `qp` binary.

use std::path::Path;
use std::process::{Command, Output};

fn qp(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qp")).arg("--out").arg(out).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn write_tiny_config(dir: &Path) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_qp")).args(["print-config", "--preset", "tiny"]).output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let mut cfg = qp_core::Config::from_toml(&text).unwrap();
    cfg.data.train_videos = 2;
    cfg.data.test_clean_videos = 1;
    cfg.data.test_degraded_videos = 1;
    cfg.data.length = 12;
    cfg.training.steps = 5;
    let p = dir.join("tiny.toml");
    std::fs::write(&p, cfg.to_toml()).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn bad_config_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[model]\nstages = 0\n").unwrap();
    let o = qp(dir.path(), &["--config", bad.to_str().unwrap(), "gen-data"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("error:"));
}

#[test]
fn missing_weights_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = qp(dir.path(), &["eval", "--weights", "/nonexistent.safetensors"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn partial_ablation_exits_two_and_still_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    assert!(qp(dir.path(), &["--config", &cfg, "gen-data"]).status.success());
    assert!(qp(dir.path(), &["--config", &cfg, "train", "--kind", "full"]).status.success());
    assert!(dir.path().join("full.safetensors").exists());
    assert!(dir.path().join("full_train.csv").exists());

    let o = qp(dir.path(), &["--config", &cfg, "--deterministic", "ablate", "--suite", "t2"]);
    assert_eq!(o.status.code(), Some(2));
    let report = std::fs::read_to_string(dir.path().join("ablation_t2.json")).unwrap();
    assert!(report.contains("missing weights baseline"));

    let o = qp(dir.path(), &["--config", &cfg, "--deterministic", "ablate", "--suite", "t3"]);
    assert_eq!(o.status.code(), Some(0));
    let o = qp(dir.path(), &["plot"]);
    assert!(o.status.success());
    assert!(dir.path().join("plots/t3_scatter.svg").exists());
    assert!(dir.path().join("plots/t2_bars.svg").exists());
}
