//! Configuration tree. Every section mirrors a block of the TOML config file;
//! missing keys fall back to the defaults below.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::propagation::PropagationVariant;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub relation: RelationConfig,
    pub memory: MemoryConfig,
    pub propagation: PropagationConfig,
    pub gate: GateConfig,
    pub scheduler: SchedulerConfig,
    pub training: TrainingConfig,
    pub eval: EvalConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            relation: RelationConfig::default(),
            memory: MemoryConfig::default(),
            propagation: PropagationConfig::default(),
            gate: GateConfig::default(),
            scheduler: SchedulerConfig::default(),
            training: TrainingConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_videos: usize,
    pub test_clean_videos: usize,
    pub test_degraded_videos: usize,
    pub length: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Object side length as a fraction of the frame side.
    pub object_size: [f64; 2],
    /// Maximum constant speed in pixels per frame.
    pub max_speed: f64,
    /// Probability that an object beyond the first enters mid-video.
    pub late_entry_prob: f64,
    /// Fraction of training videos that receive the degraded spec.
    pub train_degraded_fraction: f64,
    /// Pixel degradation for clean videos; `jitter_px` perturbs trajectories.
    pub clean: crate::synthdata::DegradationSpec,
    pub degraded: crate::synthdata::DegradationSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_videos: 160,
            test_clean_videos: 20,
            test_degraded_videos: 20,
            length: 60,
            height: 128,
            width: 128,
            num_classes: 4,
            min_objects: 1,
            max_objects: 3,
            object_size: [0.18, 0.32],
            max_speed: 2.0,
            late_entry_prob: 0.3,
            train_degraded_fraction: 0.5,
            clean: crate::synthdata::DegradationSpec { jitter_px: 1.0, ..crate::synthdata::DegradationSpec::none() },
            degraded: crate::synthdata::DegradationSpec {
                blur_sigma_range: [0.6, 1.8],
                occluder_rate: 0.5,
                jitter_px: 1.0,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Backbone widths, one per conv block.
    pub backbone_channels: Vec<usize>,
    /// Leading blocks that stride by 2; the feature stride is `2^downsample_blocks`.
    pub downsample_blocks: usize,
    pub num_queries: usize,
    pub query_dim: usize,
    pub roi_size: usize,
    pub roi_sampling: usize,
    pub dyn_hidden: usize,
    pub attn_heads: usize,
    /// Dynamic stages in the key head, TQEHead included.
    pub stages: usize,
    /// Share classification and regression branches across stages.
    pub share_predictors: bool,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub cost_class: f64,
    pub cost_l1: f64,
    pub cost_giou: f64,
}

impl ModelConfig {
    pub fn feat_channels(&self) -> usize {
        *self.backbone_channels.last().expect("backbone needs at least one block")
    }

    pub fn stride(&self) -> usize {
        1 << self.downsample_blocks.min(self.backbone_channels.len())
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone_channels: vec![16, 32, 64, 64],
            downsample_blocks: 3,
            num_queries: 20,
            query_dim: 128,
            roi_size: 7,
            roi_sampling: 2,
            dyn_hidden: 32,
            attn_heads: 4,
            stages: 6,
            share_predictors: false,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            cost_class: 2.0,
            cost_l1: 5.0,
            cost_giou: 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RelationConfig {
    pub heads: usize,
    pub geo_dim: usize,
    pub use_geometry: bool,
}

impl Default for RelationConfig {
    fn default() -> Self {
        Self { heads: 4, geo_dim: 64, use_geometry: true }
    }
}

/// Which boxes stand for the current key frame's queries in short-term geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryBoxSource {
    /// Boxes regressed from the TQEHead dynamic update.
    Stage6,
    /// Boxes entering the TQEHead (stage-5 output).
    Stage5,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MemoryConfig {
    pub enabled: bool,
    /// Short-term key frames kept.
    #[serde(rename = "M")]
    pub short_frames: usize,
    /// Top queries moved to the long pool per evicted key frame.
    #[serde(rename = "l")]
    pub top_per_frame: usize,
    /// Long-term queries sampled per key frame.
    #[serde(rename = "T")]
    pub long_samples: usize,
    pub pool_cap: usize,
    pub query_boxes: QueryBoxSource,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            short_frames: 4,
            top_per_frame: 10,
            long_samples: 50,
            pool_cap: 5000,
            query_boxes: QueryBoxSource::Stage6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PropagationConfig {
    pub variant: PropagationVariant,
}

impl Default for PropagationConfig {
    fn default() -> Self {
        Self { variant: PropagationVariant::D }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GateConfig {
    pub beta: f64,
    pub m: usize,
    pub threshold: f64,
    pub max_interval: usize,
    /// Candidate key frames are drawn from this many frames before the anchor.
    pub window: usize,
    pub steps: usize,
    pub lr: f64,
    pub conv_channels: usize,
    /// Loss that pseudo-labels are thresholded on.
    pub label_loss: LabelLoss,
}

/// `cls`: the classification term only; `total`: the weighted detection loss
/// including the box terms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelLoss {
    Cls,
    Total,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            beta: 1.5,
            m: 10,
            threshold: 0.5,
            max_interval: 20,
            window: 20,
            steps: 800,
            lr: 1e-3,
            conv_channels: 16,
            label_loss: LabelLoss::Cls,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedulerMode {
    Fixed,
    Adaptive,
    AlwaysKey,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchedulerConfig {
    pub mode: SchedulerMode,
    /// Key-frame interval for `fixed` mode.
    pub interval: usize,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self { mode: SchedulerMode::Adaptive, interval: 10 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub steps: usize,
    /// Steps of the warm-start run that `baseline` and `full` both start from.
    pub pretrain_steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Step-decay points as fractions of `steps`; lr is multiplied by 0.1 at each.
    pub milestones: Vec<f64>,
    pub grad_clip: f64,
    pub tau: usize,
    /// Largest key-to-non-key offset sampled per step.
    pub max_offset: usize,
    /// Non-key head variants trained jointly.
    pub variants: Vec<PropagationVariant>,
    /// Probability of training a step with empty memory.
    pub empty_memory_prob: f64,
    pub log_every: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            steps: 4000,
            pretrain_steps: 8000,
            lr: 2.5e-4,
            weight_decay: 1e-4,
            milestones: vec![0.7, 0.9],
            grad_clip: 1.0,
            tau: 3,
            max_offset: 10,
            variants: vec![PropagationVariant::D],
            empty_memory_prob: 0.0,
            log_every: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    pub score_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { iou_threshold: 0.5, score_threshold: 0.05 }
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let bad = |msg: String| Err(Error::Config(msg));
        if m.num_queries == 0 || m.query_dim == 0 || m.roi_size == 0 {
            return bad("model dimensions must be positive".into());
        }
        if m.query_dim % m.attn_heads != 0 {
            return bad(format!("attn_heads {} must divide query_dim {}", m.attn_heads, m.query_dim));
        }
        if m.query_dim % self.relation.heads != 0 {
            return bad(format!("relation.heads {} must divide query_dim {}", self.relation.heads, m.query_dim));
        }
        if self.relation.geo_dim % 8 != 0 || self.relation.geo_dim == 0 {
            return bad("relation.geo_dim must be a positive multiple of 8".into());
        }
        if m.stages < 2 {
            return bad("model.stages must be at least 2".into());
        }
        if m.backbone_channels.is_empty() {
            return bad("model.backbone_channels must be nonempty".into());
        }
        if m.downsample_blocks > m.backbone_channels.len() {
            return bad("model.downsample_blocks exceeds the number of backbone blocks".into());
        }
        if self.data.num_classes < 2 {
            return bad("data.num_classes must be at least 2".into());
        }
        if self.gate.beta < 1.0 {
            return bad("gate.beta must be >= 1".into());
        }
        if self.gate.m == 0 {
            return bad("gate.m must be >= 1".into());
        }
        if self.scheduler.interval == 0 {
            return bad("scheduler.interval must be >= 1".into());
        }
        if self.training.variants.is_empty() {
            return bad("training.variants must list at least one variant".into());
        }
        self.data.clean.validate()?;
        self.data.degraded.validate()?;
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }

    /// Reduced dimensions used by tests and the acceptance benchmark on CPU.
    pub fn desk() -> Self {
        let mut c = Self::default();
        c.data.height = 64;
        c.data.width = 64;
        c.model.backbone_channels = vec![16, 32, 32, 32];
        // 64x64 frames at stride 4 keep the 16x16 feature grid of 128x128 at stride 8
        c.model.downsample_blocks = 2;
        c.model.num_queries = 10;
        c.model.query_dim = 64;
        c.model.roi_size = 4;
        c.model.dyn_hidden = 16;
        c.relation.geo_dim = 32;
        // on the toy videos the class term barely changes with key distance;
        // box drift is what propagation gets wrong
        c.gate.label_loss = LabelLoss::Total;
        c
    }

    /// Minimal dimensions for finite-difference checks and fast unit tests.
    pub fn tiny() -> Self {
        let mut c = Self::desk();
        c.data.height = 16;
        c.data.width = 16;
        c.model.backbone_channels = vec![3, 4];
        c.model.num_queries = 3;
        c.model.query_dim = 8;
        c.model.roi_size = 2;
        c.model.dyn_hidden = 3;
        c.model.attn_heads = 2;
        c.relation.heads = 2;
        c.relation.geo_dim = 8;
        c.gate.conv_channels = 3;
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = Config::default();
        c.validate().unwrap();
        let back = Config::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.digest(), c.digest());
    }

    #[test]
    fn memory_keys_use_short_names() {
        let c = Config::from_toml("[memory]\nM = 10\nl = 50\nT = 500\npool_cap = 100\n").unwrap();
        assert_eq!((c.memory.short_frames, c.memory.top_per_frame, c.memory.long_samples), (10, 50, 500));
        assert_eq!(c.memory.pool_cap, 100);
    }

    #[test]
    fn variant_key_parses() {
        let c = Config::from_toml("[propagation]\nvariant = \"c2\"\n").unwrap();
        assert_eq!(c.propagation.variant, PropagationVariant::C2);
    }

    #[test]
    fn digest_changes_with_config() {
        let a = Config::default();
        let mut b = a.clone();
        b.gate.beta = 1.25;
        assert_ne!(a.digest(), b.digest());
    }

    #[test]
    fn rejects_unknown_keys_and_bad_heads() {
        assert!(Config::from_toml("[gate]\nbogus = 1\n").is_err());
        assert!(Config::from_toml("[model]\nquery_dim = 10\nattn_heads = 4\n").is_err());
    }
}
