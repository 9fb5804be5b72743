use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Gradient closure of a recorded op. Receives the upstream gradient and a
/// flag per parent telling whether that parent needs a gradient at all, and
/// returns one optional gradient per parent.
pub(crate) type BackwardFn<T> = Box<dyn FnOnce(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    parents: Vec<Option<usize>>,
    backward: Option<BackwardFn<T>>,
}

/// A value flowing through the graph. Untracked values (constants, or
/// results computed purely from constants) carry no node id and are freed as
/// soon as the last handle drops.
#[derive(Clone, Debug)]
pub struct Var<T> {
    id: Option<usize>,
    value: Arc<Tensor<T>>,
}

impl<T: Scalar> Var<T> {
    pub fn constant(value: Tensor<T>) -> Self {
        Self {
            id: None,
            value: Arc::new(value),
        }
    }

    pub fn constant_shared(value: Arc<Tensor<T>>) -> Self {
        Self { id: None, value }
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shared(&self) -> Arc<Tensor<T>> {
        self.value.clone()
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn is_tracked(&self) -> bool {
        self.id.is_some()
    }

    /// Same value, cut off from the graph.
    pub fn detach(&self) -> Self {
        Self {
            id: None,
            value: self.value.clone(),
        }
    }
}

/// Reverse-mode tape. Ops append nodes in evaluation order, so walking the
/// node list backwards is a valid topological order for the backward pass.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Arc<Tensor<T>>) -> Var<T> {
        let id = self.nodes.len();
        self.nodes.push(Node {
            parents: Vec::new(),
            backward: None,
        });
        Var {
            id: Some(id),
            value,
        }
    }

    pub fn param_owned(&mut self, value: Tensor<T>) -> Var<T> {
        self.param(Arc::new(value))
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records the result of an op. When none of the parents is tracked the
    /// closure is dropped and an untracked value is returned.
    pub(crate) fn record<F>(&mut self, value: Arc<Tensor<T>>, parents: &[&Var<T>], backward: F) -> Var<T>
    where
        F: FnOnce(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + 'static,
    {
        if parents.iter().all(|p| p.id.is_none()) {
            return Var { id: None, value };
        }
        let id = self.nodes.len();
        self.nodes.push(Node {
            parents: parents.iter().map(|p| p.id).collect(),
            backward: Some(Box::new(backward)),
        });
        Var {
            id: Some(id),
            value,
        }
    }

    /// Back-propagates from a single-element `loss`. Consumes the tape; the
    /// returned gradients cover every leaf created with [`Graph::param`]
    /// that the loss depends on.
    pub fn backward(mut self, loss: &Var<T>) -> Result<Gradients<T>> {
        if loss.value.len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let Some(root) = loss.id else {
            return Ok(Gradients { grads });
        };
        grads[root] = Some(Tensor::full(loss.shape(), T::one()));

        for id in (0..=root).rev() {
            let Some(backward) = self.nodes[id].backward.take() else {
                continue;
            };
            let Some(upstream) = grads[id].take() else {
                continue;
            };
            let parents = std::mem::take(&mut self.nodes[id].parents);
            let needs: Vec<bool> = parents.iter().map(Option::is_some).collect();
            let parent_grads = backward(&upstream, &needs);
            debug_assert_eq!(parent_grads.len(), parents.len());
            for (parent, grad) in parents.into_iter().zip(parent_grads) {
                let (Some(pid), Some(grad)) = (parent, grad) else {
                    continue;
                };
                match &mut grads[pid] {
                    Some(acc) => acc.add_assign(&grad),
                    slot @ None => *slot = Some(grad),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to a parameter leaf; `None` when the
    /// loss does not depend on it.
    pub fn get(&self, var: &Var<T>) -> Option<&Tensor<T>> {
        var.id.and_then(|id| self.grads.get(id)?.as_ref())
    }

    /// Like [`Gradients::get`] but yields zeros for unreachable leaves.
    pub fn get_or_zeros(&self, var: &Var<T>) -> Tensor<T> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.shape()))
    }

    pub fn take(&mut self, var: &Var<T>) -> Option<Tensor<T>> {
        var.id.and_then(|id| self.grads.get_mut(id)?.take())
    }
}
