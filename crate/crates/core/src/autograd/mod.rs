//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to [`Var`] handles. Each op
//! stores its output value and, when any input needs a gradient, a closure
//! that maps the output gradient onto input gradients. [`Graph::backward`]
//! replays the tape in reverse.

mod basic;
pub mod check;
mod loss;
mod vision;

use std::collections::HashMap;
use std::sync::Arc;

use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub(crate) use basic::sigmoid;
pub use vision::{roi_align_forward, BoxCoder, RoiAlignSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Which leaves receive gradients.
#[derive(Clone, Debug)]
pub enum GradMode {
    Off,
    All,
    /// Only parameters whose mask entry is `true` (indexed by [`ParamId`]).
    Mask(Arc<Vec<bool>>),
}

pub(crate) struct BackCtx<'a> {
    pub grad: &'a Tensor,
    pub inputs: Vec<&'a Tensor>,
    pub out: &'a Tensor,
    pub needs: Vec<bool>,
}

type BackFn = Box<dyn Fn(&BackCtx<'_>) -> Vec<Option<Tensor>>>;

struct Node {
    value: Arc<Tensor>,
    inputs: Vec<Var>,
    backward: Option<BackFn>,
    needs_grad: bool,
}

pub struct Graph {
    nodes: Vec<Node>,
    bound: HashMap<ParamId, Var>,
    mode: GradMode,
    interactions: usize,
}

impl Graph {
    pub fn new(mode: GradMode) -> Self {
        Self { nodes: Vec::new(), bound: HashMap::new(), mode, interactions: 0 }
    }

    /// Forward-only evaluation.
    pub fn inference() -> Self {
        Self::new(GradMode::Off)
    }

    pub fn training() -> Self {
        Self::new(GradMode::All)
    }

    pub fn tracks_grad(&self) -> bool {
        !matches!(self.mode, GradMode::Off)
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Number of dynamic-interaction evaluations recorded on this graph.
    pub fn interactions(&self) -> usize {
        self.interactions
    }

    pub(crate) fn count_interaction(&mut self) {
        self.interactions += 1;
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Detached copy of a node value.
    pub fn tensor(&self, v: Var) -> Tensor {
        self.nodes[v.0].value.as_ref().clone()
    }

    fn leaf(&mut self, value: Arc<Tensor>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, inputs: Vec::new(), backward: None, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(Arc::new(t), false)
    }

    /// A leaf that receives a gradient whenever gradients are tracked.
    pub fn input(&mut self, t: Tensor) -> Var {
        let needs = self.tracks_grad();
        self.leaf(Arc::new(t), needs)
    }

    /// Binds a stored parameter. Repeated binds return the same leaf.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let needs = match &self.mode {
            GradMode::Off => false,
            GradMode::All => true,
            GradMode::Mask(m) => m.get(id.0).copied().unwrap_or(false),
        };
        let v = self.leaf(store.get_shared(id), needs);
        self.bound.insert(id, v);
        v
    }

    pub(crate) fn push(
        &mut self,
        value: Tensor,
        inputs: Vec<Var>,
        backward: impl Fn(&BackCtx<'_>) -> Vec<Option<Tensor>> + 'static,
    ) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        let backward: Option<BackFn> = if needs_grad { Some(Box::new(backward)) } else { None };
        self.nodes.push(Node { value: Arc::new(value), inputs, backward, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward requires a scalar output");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(back) = &node.backward else { continue };
            let Some(grad) = grads[i].take() else { continue };
            let ctx = BackCtx {
                grad: &grad,
                inputs: node.inputs.iter().map(|v| self.nodes[v.0].value.as_ref()).collect(),
                out: &node.value,
                needs: node.inputs.iter().map(|v| self.nodes[v.0].needs_grad).collect(),
            };
            let input_grads = back(&ctx);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for (v, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[v.0].needs_grad {
                    continue;
                }
                debug_assert_eq!(g.shape(), self.nodes[v.0].value.shape());
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        let params = self.bound.iter().filter_map(|(&id, &v)| grads[v.0].take().map(|g| (id, g))).collect();
        let leaves = grads
            .into_iter()
            .enumerate()
            .filter(|(i, g)| g.is_some() && self.nodes[*i].backward.is_none())
            .map(|(i, g)| (Var(i), g.unwrap()))
            .collect();
        Gradients { params, leaves }
    }
}

pub struct Gradients {
    params: HashMap<ParamId, Tensor>,
    leaves: HashMap<Var, Tensor>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    /// Gradient of a leaf created with [`Graph::input`].
    pub fn leaf(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(&v)
    }

    pub fn into_params(self) -> HashMap<ParamId, Tensor> {
        self.params
    }
}
