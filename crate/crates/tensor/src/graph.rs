//! Reverse-mode tape.
//!
//! A [`Graph`] owns a flat `Vec` of nodes in insertion order. Ops push one
//! node each and, when any parent requires gradients, a backward closure that
//! scatters the upstream gradient into the parents' slots. `backward()` walks
//! the tape once in reverse; the traversal is plain index order, which is a
//! valid topological order because parents always precede children.
//!
//! Gradient buffers for interior nodes live only for the duration of one
//! `backward()` call. Gradients of leaves persist on the graph and accumulate
//! additively across calls until `zero_grads()`.

use crate::error::{Result, TensorError};
use crate::tensor::{Element, Tensor};

pub type NodeId = usize;

/// Train/eval switch for ops whose semantics differ (batchnorm).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Backward closure: `(upstream_grad, tape_values, grad_sink)`.
pub type BackwardFn<E> = Box<dyn Fn(&[E], &OpCtx<'_, E>, &mut GradSink<'_, E>)>;

pub struct Node<E: Element> {
    value: Tensor<E>,
    requires_grad: bool,
    backward: Option<BackwardFn<E>>,
}

/// Read-only view of the tape handed to backward closures so they can reload
/// parent values instead of capturing copies.
pub struct OpCtx<'a, E: Element> {
    nodes: &'a [Node<E>],
}

impl<'a, E: Element> OpCtx<'a, E> {
    pub fn value(&self, id: NodeId) -> &Tensor<E> {
        &self.nodes[id].value
    }
}

/// Where backward closures deposit parent gradients.
pub struct GradSink<'a, E: Element> {
    nodes: &'a [Node<E>],
    local: &'a mut Vec<Option<Vec<E>>>,
}

impl<'a, E: Element> GradSink<'a, E> {
    /// Whether anything upstream of `id` wants a gradient. Closures should
    /// skip work for parents that don't.
    pub fn wants(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    /// Gradient buffer for `id`, zero-initialized on first touch.
    pub fn accum(&mut self, id: NodeId) -> &mut [E] {
        let len = self.nodes[id].value.len();
        self.local[id].get_or_insert_with(|| vec![E::zero(); len])
    }
}

pub struct Graph<E: Element> {
    nodes: Vec<Node<E>>,
    leaf_grads: Vec<Option<Tensor<E>>>,
}

impl<E: Element> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Graph<E> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert an input node. Only leaves with `requires_grad` collect
    /// persistent gradients.
    pub fn leaf(&mut self, value: Tensor<E>, requires_grad: bool) -> NodeId {
        self.push_node(value, requires_grad, None)
    }

    /// Leaf that never takes a gradient (masks, fixed coefficients, ...).
    pub fn constant(&mut self, value: Tensor<E>) -> NodeId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<E> {
        &self.nodes[id].value
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor<E>> {
        self.leaf_grads[id].as_ref()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.leaf_grads {
            *g = None;
        }
    }

    /// True if any of `parents` needs a gradient — ops use this to decide
    /// whether to build a backward closure at all.
    pub fn any_requires(&self, parents: &[NodeId]) -> bool {
        parents.iter().any(|&p| self.nodes[p].requires_grad)
    }

    /// Append an op node. `op` names the operation for the non-finite debug
    /// guard; `backward` may be `None` when no parent requires gradients.
    pub fn push_op(
        &mut self,
        op: &'static str,
        value: Tensor<E>,
        parents: &[NodeId],
        backward: Option<BackwardFn<E>>,
    ) -> NodeId {
        let requires = self.any_requires(parents);
        debug_assert!(
            value.is_all_finite(),
            "non-finite value out of `{op}` (shape {:?})",
            value.shape()
        );
        self.push_node(value, requires, if requires { backward } else { None })
    }

    fn push_node(
        &mut self,
        value: Tensor<E>,
        requires_grad: bool,
        backward: Option<BackwardFn<E>>,
    ) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            requires_grad,
            backward,
        });
        self.leaf_grads.push(None);
        id
    }

    /// Reverse sweep from a scalar loss node. Leaf gradients accumulate
    /// additively across repeated calls.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let value_len = self.nodes[loss].value.len();
        if value_len != 1 {
            return Err(TensorError::NonScalarLoss { len: value_len });
        }
        if !self.nodes[loss].requires_grad {
            // Loss built purely from constants; nothing to propagate.
            return Ok(());
        }

        let mut local: Vec<Option<Vec<E>>> = vec![None; self.nodes.len()];
        local[loss] = Some(vec![E::one()]);

        for id in (0..=loss).rev() {
            let Some(upstream) = local[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            match &node.backward {
                Some(bw) => {
                    let ctx = OpCtx { nodes: &self.nodes };
                    let mut sink = GradSink {
                        nodes: &self.nodes,
                        local: &mut local,
                    };
                    bw(&upstream, &ctx, &mut sink);
                }
                None => {
                    // Leaf: fold into the persistent accumulator.
                    let shape = node.value.shape().to_vec();
                    match &mut self.leaf_grads[id] {
                        Some(acc) => {
                            for (a, g) in acc.data_mut().iter_mut().zip(upstream.iter()) {
                                *a = *a + *g;
                            }
                        }
                        slot @ None => {
                            *slot = Some(Tensor::new(shape, upstream).expect("grad shape"));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(vec![2, 2]), true);
        let err = g.backward(x).unwrap_err();
        assert!(matches!(err, TensorError::NonScalarLoss { len: 4 }));
    }

    #[test]
    fn leaf_grads_accumulate_across_backward_calls() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(), true);
        let s = g.sum(x);
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 2.0]);
        g.zero_grads();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn constant_only_loss_is_a_no_op() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert!(g.grad(x).is_none());
    }
}
