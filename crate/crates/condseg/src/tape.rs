//! Reverse-mode automatic differentiation tape.
//!
//! Every differentiable operation appends one node to the tape: the output
//! value plus a record of the operation and its input node ids. Nodes are
//! appended in execution order, so ids are already a topological order and
//! [`Tape::backward`] simply walks them in exact reverse, accumulating
//! (`+=`, never overwriting) into per-node gradient buffers.
//!
//! The tape is consumed by `backward`, which is the "tape cleared
//! afterward" contract: gradients survive in the returned [`Gradients`],
//! the recorded graph does not.
//!
//! A tape (and therefore a forward/backward pass) is single-threaded by
//! contract. Tapes, tensors and parameter sets are all `Send`, so
//! independent models may train in parallel threads; nothing here is
//! shared between instances.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

/// Operation record for backward. Saved fields are whatever the reverse
/// rule needs beyond the parents' forward values.
#[derive(Debug)]
pub(crate) enum Op<S: Scalar> {
    Leaf,
    Param(ParamId),
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
        pad: usize,
    },
    Linear {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    Relu {
        input: NodeId,
    },
    Sigmoid {
        input: NodeId,
    },
    GlobalAvgPool {
        input: NodeId,
    },
    MaxPool2 {
        input: NodeId,
        argmax: Vec<u32>,
    },
    Upsample2 {
        input: NodeId,
    },
    ConcatChannels {
        a: NodeId,
        b: NodeId,
    },
    ConcatVec {
        a: NodeId,
        b: NodeId,
    },
    ChannelScale {
        x: NodeId,
        gate: NodeId,
    },
    ChannelBias {
        x: NodeId,
        bias: NodeId,
    },
    SliceCols {
        input: NodeId,
        start: usize,
    },
    Reshape {
        input: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        input: NodeId,
        factor: S,
    },
    Sum {
        input: NodeId,
    },
    BceWithLogits {
        pred: NodeId,
        target: NodeId,
        channel_weights: Option<Vec<S>>,
    },
}

pub(crate) struct Node<S: Scalar> {
    pub value: Tensor<S>,
    pub requires_grad: bool,
    pub op: Op<S>,
}

/// Recording tape. One per forward/backward pass.
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    param_nodes: HashMap<ParamId, NodeId>,
    /// Debug-mode record of the first op that produced a non-finite value.
    poison: Option<&'static str>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            poison: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record a constant input (no gradient).
    pub fn leaf(&mut self, value: Tensor<S>) -> NodeId {
        self.push_unchecked(value, false, Op::Leaf)
    }

    /// Record an input that should receive a gradient (used by gradient
    /// checks on activations and metadata).
    pub fn leaf_grad(&mut self, value: Tensor<S>) -> NodeId {
        self.push_unchecked(value, true, Op::Leaf)
    }

    /// Record a parameter, memoized per tape so that a parameter used
    /// twice in one graph maps to a single node and its gradient
    /// contributions accumulate.
    pub fn param(&mut self, params: &ParamSet<S>, id: ParamId) -> NodeId {
        if let Some(&node) = self.param_nodes.get(&id) {
            return node;
        }
        let node = self.push_unchecked(params.value(id).clone(), true, Op::Param(id));
        self.param_nodes.insert(id, node);
        node
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// First op (if any) that produced NaN/Inf. Only tracked when debug
    /// assertions are enabled; `None` in release builds.
    pub fn poison(&self) -> Option<&'static str> {
        self.poison
    }

    pub(crate) fn op_output(
        &mut self,
        op_name: &'static str,
        value: Tensor<S>,
        requires_grad: bool,
        op: Op<S>,
    ) -> NodeId {
        if cfg!(debug_assertions) && self.poison.is_none() && !value.all_finite() {
            self.poison = Some(op_name);
        }
        self.push_unchecked(value, requires_grad, op)
    }

    fn push_unchecked(&mut self, value: Tensor<S>, requires_grad: bool, op: Op<S>) -> NodeId {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar loss. Consumes the tape; gradients for
    /// leaf and parameter nodes survive in the returned map.
    pub fn backward(self, loss: NodeId) -> Result<Gradients<S>> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::invalid(
                "backward",
                format!(
                    "loss must be scalar, got shape {:?}",
                    self.nodes[loss.0].value.shape()
                ),
            ));
        }
        if let Some(op) = self.poison {
            return Err(Error::Diverged(format!(
                "non-finite values produced by op {op}"
            )));
        }
        let Tape {
            nodes,
            param_nodes: _,
            poison: _,
        } = self;

        // Export map rebuilt from the op records themselves.
        let param_nodes: HashMap<ParamId, NodeId> = nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) => Some((id, NodeId(i))),
                _ => None,
            })
            .collect();

        let mut grads: Vec<Option<Tensor<S>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(nodes[loss.0].value.shape(), S::one()));

        for i in (0..=loss.0).rev() {
            if !nodes[i].requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(grad) = grads[i].take() else {
                continue;
            };
            match &nodes[i].op {
                // Terminal nodes keep their gradient for export.
                Op::Leaf | Op::Param(_) => {
                    grads[i] = Some(grad);
                }
                _ => crate::ops::backward_step(&nodes, i, &grad, &mut grads),
            }
        }

        Ok(Gradients {
            grads,
            param_nodes,
        })
    }
}

/// Gradients produced by one backward sweep.
pub struct Gradients<S: Scalar> {
    grads: Vec<Option<Tensor<S>>>,
    param_nodes: HashMap<ParamId, NodeId>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of the loss w.r.t. a leaf node, if it was reachable and
    /// grad-tracked.
    pub fn node(&self, id: NodeId) -> Option<&Tensor<S>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient for a registered parameter.
    pub fn param(&self, id: ParamId) -> Option<&Tensor<S>> {
        self.param_nodes.get(&id).and_then(|n| self.node(*n))
    }
}

pub(crate) fn accumulate<S: Scalar>(
    grads: &mut [Option<Tensor<S>>],
    target: NodeId,
    contribution: Tensor<S>,
) {
    match &mut grads[target.0] {
        Some(existing) => {
            debug_assert_eq!(existing.shape(), contribution.shape());
            for (acc, add) in existing.data_mut().iter_mut().zip(contribution.data()) {
                *acc = *acc + *add;
            }
        }
        slot @ None => *slot = Some(contribution),
    }
}
