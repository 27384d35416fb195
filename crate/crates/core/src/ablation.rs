//! Toy analogues of the ablation tables: each row is one inference setting
//! over shared trained weights.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::config::{Config, SchedulerMode};
use crate::error::{Error, Result};
use crate::eval::evaluate_videos;
use crate::model::QueryPropModel;
use crate::pipeline::RunOptions;
use crate::propagation::PropagationVariant;
use crate::synthdata::VideoSample;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    T2,
    T3,
    T4,
    T5,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::T2, Suite::T3, Suite::T4, Suite::T5];

    pub fn tag(self) -> &'static str {
        match self {
            Suite::T2 => "t2",
            Suite::T3 => "t3",
            Suite::T4 => "t4",
            Suite::T5 => "t5",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Suite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL.into_iter().find(|v| v.tag() == s.to_ascii_lowercase()).ok_or_else(|| Error::Config(format!("unknown suite {s:?}")))
    }
}

/// Weight files an ablation may refer to.
pub const BASELINE: &str = "baseline";
pub const FULL: &str = "full";
/// Warm-start weights shared by `baseline` and `full`.
pub const PRETRAIN: &str = "pretrain";

pub fn gate_weights_name(beta: f64) -> String {
    format!("gate_b{beta}")
}

/// One row: which weights, and how to run them.
#[derive(Clone, Debug, PartialEq)]
pub struct RowSpec {
    pub name: String,
    pub weights: String,
    pub scheduler: SchedulerMode,
    pub interval: usize,
    pub variant: PropagationVariant,
    pub memory: bool,
    /// `(M, T)` override of the memory sizes.
    pub memory_sizes: Option<(usize, usize)>,
}

impl RowSpec {
    fn new(name: impl Into<String>, weights: impl Into<String>, scheduler: SchedulerMode, memory: bool) -> Self {
        Self {
            name: name.into(),
            weights: weights.into(),
            scheduler,
            interval: 10,
            variant: PropagationVariant::D,
            memory,
            memory_sizes: None,
        }
    }

    fn interval(mut self, k: usize) -> Self {
        self.interval = k;
        self
    }

    fn variant(mut self, v: PropagationVariant) -> Self {
        self.variant = v;
        self
    }

    fn sizes(mut self, m: usize, t: usize) -> Self {
        self.memory_sizes = Some((m, t));
        self
    }

    pub fn options(&self, cfg: &Config) -> RunOptions {
        let mut o = RunOptions::from_config(cfg);
        o.scheduler = self.scheduler;
        o.interval = self.interval;
        o.variant = self.variant;
        o.memory.enabled = self.memory;
        if let Some((m, t)) = self.memory_sizes {
            o.memory.short_frames = m;
            o.memory.long_samples = t;
        }
        o
    }
}

pub fn suite_rows(suite: Suite) -> Vec<RowSpec> {
    use SchedulerMode::*;
    match suite {
        Suite::T2 => vec![
            RowSpec::new("baseline (6 stages every frame)", BASELINE, AlwaysKey, false),
            RowSpec::new("key->non-key, fixed k=10", BASELINE, Fixed, false),
            RowSpec::new("key->key (always_key + TQE)", FULL, AlwaysKey, true),
            RowSpec::new("both, fixed k=10", FULL, Fixed, true),
            RowSpec::new("both + APG (beta=1.5)", gate_weights_name(1.5), Adaptive, true),
        ],
        Suite::T3 => PropagationVariant::ALL
            .iter()
            .map(|&v| RowSpec::new(format!("variant {v}"), FULL, Fixed, true).variant(v))
            .collect(),
        Suite::T4 => {
            let mut rows: Vec<RowSpec> = [5, 10, 15].iter().map(|&k| RowSpec::new(format!("fixed k={k}"), FULL, Fixed, true).interval(k)).collect();
            for beta in [1.25, 1.5] {
                rows.push(RowSpec::new(format!("adaptive beta={beta}"), gate_weights_name(beta), Adaptive, true));
            }
            rows
        }
        Suite::T5 => vec![
            RowSpec::new("no memory", FULL, AlwaysKey, false),
            RowSpec::new("short M=2", FULL, AlwaysKey, true).sizes(2, 0),
            RowSpec::new("short M=4", FULL, AlwaysKey, true).sizes(4, 0),
            RowSpec::new("long T=50", FULL, AlwaysKey, true).sizes(0, 50),
            RowSpec::new("M=4, T=10", FULL, AlwaysKey, true).sizes(4, 10),
            RowSpec::new("M=4, T=50", FULL, AlwaysKey, true).sizes(4, 50),
        ],
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub weights: String,
    pub map: f64,
    pub split_map: BTreeMap<String, f64>,
    pub stages_per_frame: f64,
    pub mean_key_interval: f64,
    /// Reason the row was not evaluated.
    pub skipped: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub suite: Suite,
    pub rows: Vec<AblationRow>,
    pub config_digest: String,
}

impl AblationTable {
    pub fn is_partial(&self) -> bool {
        self.rows.iter().any(|r| r.skipped.is_some())
    }

    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name && r.skipped.is_none())
    }

    /// Plain-text table for terminals and logs.
    pub fn render(&self) -> String {
        let mut s = format!("{}  (config {})\n", self.suite, &self.config_digest[..12.min(self.config_digest.len())]);
        s.push_str(&format!("{:<34} {:>7} {:>7} {:>9} {:>11} {:>9}\n", "row", "mAP", "clean", "degraded", "stages/frm", "interval"));
        for r in &self.rows {
            if let Some(why) = &r.skipped {
                s.push_str(&format!("{:<34} skipped: {why}\n", r.name));
                continue;
            }
            let sm = |k: &str| r.split_map.get(k).map_or("-".to_string(), |v| format!("{:.4}", v));
            s.push_str(&format!(
                "{:<34} {:>7.4} {:>7} {:>9} {:>11.3} {:>9.2}\n",
                r.name,
                r.map,
                sm("clean"),
                sm("degraded"),
                r.stages_per_frame,
                r.mean_key_interval
            ));
        }
        s
    }
}

/// Evaluates every row of `suite` on `videos`. Rows whose weights are not in
/// `models` are skipped with a warning.
pub fn ablation_suite(
    videos: &[&VideoSample],
    models: &BTreeMap<String, QueryPropModel>,
    suite: Suite,
    cfg: &Config,
    timing: bool,
) -> Result<AblationTable> {
    let digest = cfg.digest();
    let mut rows = Vec::new();
    for spec in suite_rows(suite) {
        let Some(model) = models.get(&spec.weights) else {
            warn!("{suite}: skipping row {:?}: weights {:?} not available", spec.name, spec.weights);
            rows.push(AblationRow {
                name: spec.name,
                weights: spec.weights.clone(),
                map: 0.0,
                split_map: BTreeMap::new(),
                stages_per_frame: 0.0,
                mean_key_interval: 0.0,
                skipped: Some(format!("missing weights {}", spec.weights)),
            });
            continue;
        };
        let mut opts = spec.options(cfg);
        opts.timing = timing;
        let (report, _) = evaluate_videos(model, &opts, videos, &cfg.eval, &digest)?;
        rows.push(AblationRow {
            name: spec.name,
            weights: spec.weights,
            map: report.map_at_50,
            split_map: report.split_map,
            stages_per_frame: report.mean_head_stages_per_frame,
            mean_key_interval: report.mean_key_interval,
            skipped: None,
        });
    }
    Ok(AblationTable { suite, rows, config_digest: digest })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_video, DegradationSpec, GenConfig};

    #[test]
    fn suite_parsing() {
        assert_eq!("t3".parse::<Suite>().unwrap(), Suite::T3);
        assert_eq!("T5".parse::<Suite>().unwrap(), Suite::T5);
        assert!("t9".parse::<Suite>().is_err());
    }

    #[test]
    fn fixed_rows_report_their_interval_and_missing_rows_skip() {
        let cfg = Config::tiny();
        let mut gen = GenConfig::from_data(&cfg.data, DegradationSpec::none());
        gen.length = 30;
        let video = generate_video(&gen, 3).unwrap();
        let models = BTreeMap::from([(FULL.to_string(), QueryPropModel::new(&cfg))]);
        let t = ablation_suite(&[&video], &models, Suite::T4, &cfg, false).unwrap();
        assert!(t.is_partial());
        for (k, name) in [(5.0, "fixed k=5"), (10.0, "fixed k=10"), (15.0, "fixed k=15")] {
            let r = t.row(name).unwrap();
            assert_eq!(r.mean_key_interval, k);
        }
        assert_eq!(t.row("fixed k=10").unwrap().stages_per_frame, (3.0 * 6.0 + 27.0) / 30.0);
        assert!(t.rows.iter().filter(|r| r.name.starts_with("adaptive")).all(|r| r.skipped.is_some()));
        assert!(t.render().contains("skipped"));
    }
}
