//! Reverse-mode tape.
//!
//! Every op appends a node holding its output value and, when any input
//! requires a gradient, a closure mapping the output gradient to input
//! gradients. `backward` walks the nodes in exact reverse recording order.
//! A tape supports a single backward pass; a second call is an error.

use super::tensor::Tensor;
use crate::error::{shape_err, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Arguments handed to a backward closure.
pub struct BackwardArgs<'a> {
    pub grad_out: &'a [f32],
    pub inputs: Vec<&'a Tensor>,
    pub output: &'a Tensor,
    /// Which inputs want a gradient; closures may skip work for the rest.
    pub needs: Vec<bool>,
}

pub type BackwardFn = Box<dyn Fn(&BackwardArgs<'_>) -> Vec<Option<Vec<f32>>>>;

struct Node {
    value: Tensor,
    requires_grad: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    grad: Option<Vec<f32>>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push_leaf(value, requires_grad)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            parents: Vec::new(),
            backward: None,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an op. The backward closure is dropped when no input needs a gradient.
    pub fn push_op(&mut self, value: Tensor, parents: &[Var], backward: BackwardFn) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            parents: parents.iter().map(|p| p.0).collect(),
            backward: requires_grad.then_some(backward),
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated into `v` by [`Tape::backward`]. Only leaves keep theirs.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f32>> {
        self.nodes[v.0].grad.take()
    }

    /// Backpropagates from the scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        self.consumed = true;
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(shape_err!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            ));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(grad_out) = self.nodes[idx].grad.take() else {
                continue;
            };
            let node = &self.nodes[idx];
            let Some(backward) = node.backward.as_ref() else {
                // leaf: keep the gradient
                self.nodes[idx].grad = Some(grad_out);
                continue;
            };
            let parents = node.parents.clone();
            let grads = {
                let args = BackwardArgs {
                    grad_out: &grad_out,
                    inputs: parents.iter().map(|&p| &self.nodes[p].value).collect(),
                    output: &node.value,
                    needs: parents
                        .iter()
                        .map(|&p| self.nodes[p].requires_grad)
                        .collect(),
                };
                backward(&args)
            };
            debug_assert_eq!(grads.len(), parents.len());
            for (p, g) in parents.into_iter().zip(grads) {
                let Some(g) = g else { continue };
                let parent = &mut self.nodes[p];
                if !parent.requires_grad {
                    continue;
                }
                debug_assert_eq!(g.len(), parent.value.numel());
                match parent.grad.as_mut() {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => parent.grad = Some(g),
                }
            }
        }
        Ok(())
    }
}
