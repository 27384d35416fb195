//! The assembled network: backbone and key head, TQE relations, one
//! non-key head per propagation variant, and the gate.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::config::Config;
use crate::detector::{Detector, StageOutput};
use crate::gate::GateUnit;
use crate::params::ParamStore;
use crate::propagation::{NonKeyHead, PropagationVariant};
use crate::temporal_memory::{tqe_head, MemoryInputs, RelationHead, TqeOutput};

/// Name prefix of gate parameters; everything else belongs to the detector.
pub const GATE_PREFIX: &str = "gate.";

#[derive(Clone)]
pub struct QueryPropModel {
    pub config: Config,
    pub store: ParamStore,
    pub detector: Detector,
    pub relation: RelationHead,
    pub nonkey: Vec<NonKeyHead>,
    pub gate: GateUnit,
}

/// Key-head outputs: the plain dynamic stages followed by the TQE stage.
#[derive(Clone, Debug)]
pub struct KeyOutput {
    pub stages: Vec<StageOutput>,
    pub tqe: TqeOutput,
}

impl KeyOutput {
    /// `(logits, boxes)` of every supervised stage, TQE last.
    pub fn predictions(&self) -> Vec<(Var, Var)> {
        let mut p: Vec<(Var, Var)> = self.stages.iter().map(|s| (s.logits, s.boxes)).collect();
        p.push((self.tqe.logits, self.tqe.boxes));
        p
    }
}

impl QueryPropModel {
    /// Freshly initialized weights; deterministic in `config.seed`.
    pub fn new(config: &Config) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let k = config.data.num_classes;
        let m = &config.model;
        let detector = Detector::new(&mut store, &mut rng, m, k, (config.data.height, config.data.width));
        let relation = RelationHead::new(&mut store, &mut rng, m.query_dim, &config.relation);
        let nonkey = PropagationVariant::ALL.iter().map(|&v| NonKeyHead::new(&mut store, &mut rng, v, m, k)).collect();
        let gate = GateUnit::new(&mut store, &mut rng, m.feat_channels(), config.gate.conv_channels);
        Self { config: config.clone(), store, detector, relation, nonkey, gate }
    }

    pub fn head(&self, variant: PropagationVariant) -> &NonKeyHead {
        self.nonkey.iter().find(|h| h.variant == variant).expect("every variant has a head")
    }

    /// Full key-frame head on features `fm`: stages `0..S-1` from the
    /// learnable init, then the last stage as TQE head over `mem`.
    pub fn key_forward(&self, g: &mut Graph, fm: Var, mem: &MemoryInputs) -> KeyOutput {
        let s = &self.store;
        let stages = self.detector.run_stages(g, s, fm, self.detector.stages.len() - 1);
        let last = stages.last().expect("at least two stages");
        let b5 = g.tensor(last.boxes);
        let tqe = tqe_head(g, s, &self.detector, &self.relation, self.config.memory.query_boxes, fm, last.queries, &b5, mem);
        KeyOutput { stages, tqe }
    }

    /// Checksum over detector parameters (everything except the gate).
    pub fn detector_checksum(&self) -> String {
        self.store.checksum(|n| !n.starts_with(GATE_PREFIX))
    }

    pub fn gate_checksum(&self) -> String {
        self.store.checksum(|n| n.starts_with(GATE_PREFIX))
    }

    /// Copies every parameter of `src` whose name and shape match one of
    /// ours (warm start from pretrained weights). Returns the number copied.
    pub fn init_from(&mut self, src: &QueryPropModel) -> usize {
        let mut copied = 0;
        for (_, name, value) in src.store.iter() {
            if let Some(id) = self.store.lookup(name) {
                if self.store.get(id).shape() == value.shape() {
                    self.store.set(id, value.clone());
                    copied += 1;
                }
            }
        }
        copied
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_from_copies_matching_parameters_only() {
        let cfg = Config::tiny();
        let src = QueryPropModel::new(&Config { seed: 1, ..cfg.clone() });
        let mut dst = QueryPropModel::new(&cfg);
        assert_ne!(dst.detector_checksum(), src.detector_checksum());
        assert_eq!(dst.init_from(&src), src.store.len());
        assert_eq!(dst.detector_checksum(), src.detector_checksum());

        // a wider query dim leaves shape-mismatched tensors untouched
        let mut wide = cfg.clone();
        wide.model.query_dim = 12;
        let mut other = QueryPropModel::new(&wide);
        let before = other.store.checksum(|n| n.starts_with("key.init_queries"));
        let copied = other.init_from(&src);
        assert!(copied > 0 && copied < src.store.len());
        assert_eq!(other.store.checksum(|n| n.starts_with("key.init_queries")), before);
    }
}
