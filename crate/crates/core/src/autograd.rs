//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Every value produced during a forward pass is appended to the [`Tape`].
//! A node's parents always precede it, so walking the tape from the loss
//! backwards visits nodes in reverse topological order, each exactly once.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::nn::{Param, ParamId};
use crate::tensor::{Real, Tensor};

/// Maps the output gradient to one gradient per parent (or `None` when a
/// parent does not need one). The flags mark which parents require a
/// gradient so a primitive can skip work for constant operands.
pub type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Arc<Tensor<T>>,
    parents: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn<T>>,
}

pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
    params: RefCell<HashMap<ParamId, usize>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t, T: Real> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Real> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var").field("id", &self.id).field("shape", &self.shape()).finish()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), params: RefCell::new(HashMap::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.constant_arc(Arc::new(value))
    }

    pub fn constant_arc(&self, value: Arc<Tensor<T>>) -> Var<'_, T> {
        self.push(Node { value, parents: Vec::new(), requires_grad: false, backward: None })
    }

    /// A leaf that receives a gradient (e.g. an input image under attack).
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(Node { value: Arc::new(value), parents: Vec::new(), requires_grad: true, backward: None })
    }

    /// Registers a parameter as a leaf. Binding the same parameter twice on
    /// one tape returns the same node.
    pub fn param(&self, param: &Param<T>) -> Var<'_, T> {
        if let Some(&id) = self.params.borrow().get(&param.id()) {
            return Var { tape: self, id };
        }
        let var = self.push(Node {
            value: param.value_arc(),
            parents: Vec::new(),
            requires_grad: param.trainable(),
            backward: None,
        });
        self.params.borrow_mut().insert(param.id(), var.id);
        var
    }

    /// Records the result of a primitive. `backward` is dropped when no
    /// parent requires a gradient.
    pub fn record<F>(&self, value: Tensor<T>, parents: &[Var<'_, T>], backward: F) -> Var<'_, T>
    where
        F: Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + 'static,
    {
        let ids: Vec<usize> = parents
            .iter()
            .map(|p| {
                assert!(std::ptr::eq(p.tape, self), "operand recorded on a different tape");
                p.id
            })
            .collect();
        let requires_grad = {
            let nodes = self.nodes.borrow();
            ids.iter().any(|&i| nodes[i].requires_grad)
        };
        let backward: Option<BackwardFn<T>> = if requires_grad { Some(Box::new(backward)) } else { None };
        self.push(Node { value: Arc::new(value), parents: ids, requires_grad, backward })
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Populates gradients of the scalar `loss` with respect to every leaf
    /// that requires one.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Grads<T>> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::Usage("loss was recorded on a different tape".into()));
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::Usage(format!("backward needs a scalar loss, got shape {:?}", root.value.shape())));
        }
        if !root.requires_grad {
            return Err(Error::Usage("loss does not depend on any value that requires a gradient".into()));
        }
        let mut pending: Vec<Option<Tensor<T>>> = (0..=loss.id).map(|_| None).collect();
        pending[loss.id] = Some(Tensor::full(root.value.shape(), T::one()));
        let mut leaves = HashMap::new();
        for id in (0..=loss.id).rev() {
            let Some(grad) = pending[id].take() else { continue };
            let node = &nodes[id];
            match &node.backward {
                None => {
                    if node.requires_grad {
                        leaves.insert(id, grad);
                    }
                }
                Some(f) => {
                    let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
                    let parent_grads = f(&grad, &needs);
                    debug_assert_eq!(parent_grads.len(), node.parents.len());
                    for (&pid, g) in node.parents.iter().zip(parent_grads) {
                        let Some(g) = g else { continue };
                        if !nodes[pid].requires_grad {
                            continue;
                        }
                        debug_assert_eq!(g.shape(), nodes[pid].value.shape(), "gradient shape for node {pid}");
                        match &mut pending[pid] {
                            Some(acc) => {
                                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                                    *a += *b;
                                }
                            }
                            slot @ None => *slot = Some(g),
                        }
                    }
                }
            }
        }
        Ok(Grads { leaves, params: self.params.borrow().clone() })
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Arc<Tensor<T>> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> T {
        self.value().data()[0]
    }
}

/// Gradients of leaves after [`Tape::backward`].
pub struct Grads<T> {
    leaves: HashMap<usize, Tensor<T>>,
    params: HashMap<ParamId, usize>,
}

impl<T: Real> Grads<T> {
    pub fn of(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.leaves.get(&var.id)
    }

    pub fn of_param(&self, param: &Param<T>) -> Option<&Tensor<T>> {
        self.params.get(&param.id()).and_then(|id| self.leaves.get(id))
    }

    /// Gradient of `var` or zeros of the given shape when it received none.
    pub fn of_or_zeros(&self, var: Var<'_, T>) -> Tensor<T> {
        self.of(var).cloned().unwrap_or_else(|| Tensor::zeros(&var.shape()))
    }
}
