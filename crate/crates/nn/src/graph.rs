//! Reverse-mode tape.
//!
//! A [`Graph`] records every value produced by an op together with a closure
//! mapping the output gradient to input gradients. Variables carry the tag of
//! the tape that produced them; using a variable after [`Graph::reset`] or on a
//! different tape is reported as [`NnError::StaleTape`].

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{NnError, Result};
use crate::params::{ParamGrads, ParamStore};
use crate::tensor::Tensor;

static NEXT_TAG: AtomicU64 = AtomicU64::new(1);

fn fresh_tag() -> u64 {
    NEXT_TAG.fetch_add(1, Ordering::Relaxed)
}

/// What a backward closure sees: parent values, own value, and the incoming gradient.
pub struct BackwardCtx<'a> {
    pub inputs: Vec<&'a Tensor>,
    pub output: &'a Tensor,
    pub grad: &'a [f32],
}

/// Maps the output gradient to one optional gradient per parent.
pub type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Option<Vec<f32>>> + Send + Sync>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    index: usize,
    tag: u64,
}

pub struct Graph {
    tag: u64,
    grad_enabled: bool,
    nodes: Vec<Node>,
    params: HashMap<usize, Var>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// Tape that records backward closures for parameters and inputs.
    pub fn new() -> Self {
        Graph {
            tag: fresh_tag(),
            grad_enabled: true,
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    /// Tape for pure evaluation: nothing requires a gradient.
    pub fn inference() -> Self {
        Graph {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    /// Drops every recorded node; variables from before the reset become stale.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.params.clear();
        self.tag = fresh_tag();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tag != self.tag || v.index >= self.nodes.len() {
            return Err(NnError::StaleTape);
        }
        Ok(v.index)
    }

    pub fn value(&self, v: Var) -> Result<&Tensor> {
        let i = self.check(v)?;
        Ok(&self.nodes[i].value)
    }

    pub fn shape(&self, v: Var) -> Result<Vec<usize>> {
        Ok(self.value(v)?.shape().to_vec())
    }

    fn push(&mut self, value: Tensor, parents: Vec<usize>, backward: Option<BackwardFn>, leaf_grad: bool) -> Var {
        let requires_grad = leaf_grad || parents.iter().any(|&p| self.nodes[p].requires_grad);
        let backward = if requires_grad { backward } else { None };
        self.nodes.push(Node {
            value,
            parents,
            backward,
            requires_grad,
        });
        Var {
            index: self.nodes.len() - 1,
            tag: self.tag,
        }
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, vec![], None, false)
    }

    /// Leaf whose gradient is tracked (when the tape records gradients).
    pub fn input(&mut self, t: Tensor) -> Var {
        let g = self.grad_enabled;
        self.push(t, vec![], None, g)
    }

    /// Leaf bound to a named parameter. Repeated lookups share one node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let id = store.id(name)?;
        if let Some(&v) = self.params.get(&id) {
            return Ok(v);
        }
        let v = self.input(store.tensor_at(id).clone());
        self.params.insert(id, v);
        Ok(v)
    }

    /// Records a user-defined op. `backward` receives parent values in `parents` order.
    pub fn custom(&mut self, parents: &[Var], value: Tensor, backward: BackwardFn) -> Result<Var> {
        let idx = parents.iter().map(|&p| self.check(p)).collect::<Result<Vec<_>>>()?;
        Ok(self.push(value, idx, Some(backward), false))
    }

    /// Reverse accumulation from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let li = self.check(loss)?;
        if self.nodes[li].value.len() != 1 {
            return Err(NnError::input("backward", format!(
                "loss must have one element, shape {:?}",
                self.nodes[li].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; li + 1];
        grads[li] = Some(vec![1.0]);
        for i in (0..=li).rev() {
            let node = &self.nodes[i];
            // leaves keep their gradient; interior gradients are released once consumed
            let Some(bw) = node.backward.as_ref() else { continue };
            let Some(g) = grads[i].take() else { continue };
            let ctx = BackwardCtx {
                inputs: node.parents.iter().map(|&p| &self.nodes[p].value).collect(),
                output: &node.value,
                grad: &g,
            };
            let parent_grads = bw(&ctx);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !self.nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(pg.len(), self.nodes[p].value.len());
                match &mut grads[p] {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Ok(Gradients {
            tag: self.tag,
            grads,
            params: self.params.iter().map(|(&id, v)| (id, v.index)).collect(),
        })
    }
}

/// Gradients produced by one backward pass.
pub struct Gradients {
    tag: u64,
    grads: Vec<Option<Vec<f32>>>,
    params: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of the loss with respect to a leaf (`None` if it did not influence the loss).
    pub fn wrt(&self, v: Var) -> Result<Option<&[f32]>> {
        if v.tag != self.tag {
            return Err(NnError::StaleTape);
        }
        Ok(self.grads.get(v.index).and_then(|g| g.as_deref()))
    }

    /// Gradients for every parameter of `store` used on the tape.
    pub fn params(&self, store: &ParamStore) -> ParamGrads {
        let mut out = ParamGrads::zeros_like(store);
        for &(id, node) in &self.params {
            if let Some(g) = self.grads.get(node).and_then(|g| g.as_ref()) {
                out.add_at(id, g);
            }
        }
        out
    }
}
