//! Non-key detection head: a single dynamic stage initialized from the
//! previous key frame's enhanced queries and boxes.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{BoxCoder, Graph, RoiAlignSpec, Var};
use crate::config::ModelConfig;
use crate::detector::{BoxSet, Detector, DynamicConv, DynamicStage, FeatureMap, QuerySet, ScoreSet};
use crate::nn::{Branch, Linear};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// What the non-key head receives from the key frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PropagationVariant {
    /// Fresh learnable queries, propagated boxes.
    A,
    /// Propagated queries, fresh learnable boxes.
    B,
    /// Both propagated, no refiner.
    C1,
    /// Both propagated, boxes refined by a dedicated dynamic interaction.
    C2,
    /// Propagated queries, boxes from the previous frame's output.
    D,
}

impl PropagationVariant {
    pub const ALL: [PropagationVariant; 5] = [Self::A, Self::B, Self::C1, Self::C2, Self::D];

    pub fn tag(self) -> &'static str {
        match self {
            Self::A => "a",
            Self::B => "b",
            Self::C1 => "c1",
            Self::C2 => "c2",
            Self::D => "d",
        }
    }

    /// Dynamic interactions evaluated per non-key frame.
    pub fn interactions(self) -> usize {
        if self == Self::C2 {
            2
        } else {
            1
        }
    }
}

impl fmt::Display for PropagationVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for PropagationVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL.into_iter().find(|v| v.tag() == s).ok_or_else(|| format!("unknown propagation variant {s:?}"))
    }
}

/// Per-video state carried from the last key frame.
#[derive(Clone, Debug, PartialEq)]
pub struct PropagationState {
    pub key_queries: QuerySet,
    pub key_boxes: BoxSet,
    /// Output boxes of the previous frame (variant d's box chain).
    pub prev_boxes: BoxSet,
    pub key_features: FeatureMap,
}

impl PropagationState {
    pub fn from_key(queries: Tensor, boxes: Tensor, features: FeatureMap) -> Self {
        Self {
            key_queries: QuerySet(queries),
            prev_boxes: BoxSet(boxes.clone()),
            key_boxes: BoxSet(boxes),
            key_features: features,
        }
    }
}

/// One dynamic interaction that regresses box deltas only. The delta layer
/// starts at zero so an untrained refiner passes boxes through unchanged.
#[derive(Clone, Debug)]
pub struct BoxRefiner {
    pub dynconv: DynamicConv,
    pub reg: Branch,
}

impl BoxRefiner {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, cfg: &ModelConfig) -> Self {
        let c = cfg.query_dim;
        let out = Linear::zeros(store, &format!("{name}.reg.deltas"), c, 4);
        Self {
            dynconv: DynamicConv::new(store, rng, &format!("{name}.dynconv"), cfg),
            reg: Branch::new(store, rng, &format!("{name}.reg"), c, out),
        }
    }

    pub fn refine(&self, g: &mut Graph, store: &ParamStore, fm: Var, b: &Tensor, q: Var, spec: &RoiAlignSpec) -> Var {
        let roi = g.roi_align(fm, b, spec);
        let h = self.dynconv.forward(g, store, roi, q);
        let deltas = self.reg.forward(g, store, h);
        let base = g.constant(b.clone());
        g.apply_deltas(deltas, base, BoxCoder::default())
    }
}

#[derive(Clone, Debug)]
pub struct NonKeyHead {
    pub variant: PropagationVariant,
    /// Attention, dynamic interaction and Cls&Reg of the single stage.
    pub stage: DynamicStage,
    pub refiner: Option<BoxRefiner>,
}

#[derive(Clone, Copy, Debug)]
pub struct NonKeyOutput {
    pub logits: Var,
    pub boxes: Var,
    pub queries: Var,
}

impl NonKeyHead {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        variant: PropagationVariant,
        cfg: &ModelConfig,
        num_classes: usize,
    ) -> Self {
        let name = format!("nonkey.{variant}");
        let stage = DynamicStage::new(store, rng, &name, cfg, num_classes, None);
        let refiner = (variant == PropagationVariant::C2).then(|| BoxRefiner::new(store, rng, &format!("{name}.refiner"), cfg));
        Self { variant, stage, refiner }
    }

    /// Graph form. `key_q` may be attached to the key head's graph (training)
    /// or a constant (inference).
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        det: &Detector,
        fm: Var,
        key_q: Var,
        key_b: &Tensor,
        prev_b: &Tensor,
    ) -> NonKeyOutput {
        use PropagationVariant::*;
        let q_in = match self.variant {
            A => g.param(store, det.init_queries),
            _ => key_q,
        };
        let base = match self.variant {
            A | C1 => g.constant(key_b.clone()),
            B => g.param(store, det.init_boxes),
            C2 => {
                let r = self.refiner.as_ref().expect("c2 head has a refiner");
                r.refine(g, store, fm, key_b, key_q, &det.roi)
            }
            D => g.constant(prev_b.clone()),
        };
        let b = g.tensor(base);
        let q = self.stage.update(g, store, fm, q_in, &b, &det.roi);
        let (logits, boxes) = self.stage.predict(g, store, q, base);
        NonKeyOutput { logits, boxes, queries: q }
    }
}

/// Detects a non-key frame from its features and the propagation state.
/// Returns scores, boxes, queries and the number of dynamic interactions run.
pub fn nonkey_detect(
    store: &ParamStore,
    det: &Detector,
    head: &NonKeyHead,
    fm: &FeatureMap,
    state: &PropagationState,
) -> (ScoreSet, BoxSet, QuerySet, usize) {
    let mut g = Graph::inference();
    let f = g.constant(fm.data.clone());
    let q = g.constant(state.key_queries.0.clone());
    let out = head.forward(&mut g, store, det, f, q, &state.key_boxes.0, &state.prev_boxes.0);
    (
        ScoreSet::from_logits(g.value(out.logits)),
        BoxSet(g.tensor(out.boxes)),
        QuerySet(g.tensor(out.queries)),
        g.interactions(),
    )
}

/// Applies a standalone refiner outside any graph.
pub fn refine_boxes(store: &ParamStore, det: &Detector, refiner: &BoxRefiner, fm: &FeatureMap, b: &BoxSet, q: &QuerySet) -> BoxSet {
    let mut g = Graph::inference();
    let f = g.constant(fm.data.clone());
    let qv = g.constant(q.0.clone());
    let out = refiner.refine(&mut g, store, f, &b.0, qv, &det.roi);
    BoxSet(g.tensor(out))
}
