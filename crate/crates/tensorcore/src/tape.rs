//! Gradient tape.
//!
//! Every primitive applied to a [`Var`] appends one node holding its output
//! value and, when any input requires a gradient, a closure mapping the
//! output gradient to input gradients. Nodes are appended in evaluation
//! order, so walking the tape backwards is a valid reverse topological order.

use std::cell::{Ref, RefCell};
use std::fmt;
use std::rc::Rc;

use crate::{Float, Result, Tensor, TensorError};

/// Maps the gradient of a node's output to one optional gradient per parent.
pub type BackwardFn<T> = Box<dyn Fn(&Tensor<T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Rc<Tensor<T>>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

/// Single-writer record of applied operations.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A constant input. No gradient is tracked for it.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(Rc::new(value), Vec::new(), None, false)
    }

    /// A leaf whose gradient is reported by [`Tape::backward`].
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(Rc::new(value), Vec::new(), None, true)
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        self.push(Rc::new(value), Vec::new(), None, requires_grad)
    }

    /// Record a custom primitive. `backward` receives the output gradient and
    /// returns one entry per parent (`None` for "no contribution"). It is only
    /// stored when some parent requires a gradient.
    pub fn custom<'t, F>(&'t self, value: Tensor<T>, parents: &[Var<'t, T>], backward: F) -> Var<'t, T>
    where
        F: Fn(&Tensor<T>) -> Vec<Option<Tensor<T>>> + 'static,
    {
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        let ids = parents.iter().map(|p| p.id).collect();
        let backward: Option<BackwardFn<T>> = if requires_grad { Some(Box::new(backward)) } else { None };
        self.push(Rc::new(value), ids, backward, requires_grad)
    }

    fn push(
        &self,
        value: Rc<Tensor<T>>,
        parents: Vec<usize>,
        backward: Option<BackwardFn<T>>,
        requires_grad: bool,
    ) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { value, parents, backward, requires_grad });
        Var { tape: self, id }
    }

    /// Reverse pass from a one-element `loss`. Returns gradients for every
    /// leaf that requires one and was reached.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(TensorError::contract("backward", "loss belongs to another tape"));
        }
        let nodes = self.nodes.borrow();
        let loss_node = &nodes[loss.id];
        if loss_node.value.numel() != 1 {
            return Err(TensorError::shape(
                "backward",
                format!("loss must hold one element, shape is {:?}", loss_node.value.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(loss_node.value.shape().to_vec(), T::one()));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else { continue };
            let Some(grad) = grads[id].take() else { continue };
            let parent_grads = backward(&grad);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&pid, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !nodes[pid].requires_grad {
                    continue;
                }
                debug_assert_eq!(pg.shape(), nodes[pid].value.shape(), "gradient shape for node {pid}");
                match &mut grads[pid] {
                    Some(acc) => acc.add_assign(&pg),
                    slot => *slot = Some(pg),
                }
            }
        }
        // Only leaves keep their gradient.
        for (id, node) in nodes.iter().enumerate() {
            if node.backward.is_some() || !node.requires_grad {
                grads[id] = None;
            }
        }
        Ok(Gradients { grads })
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `var`, or zeros of its shape when it was not reached.
    pub fn get_or_zeros(&self, var: Var<'_, T>) -> Tensor<T> {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(var.shape()))
    }

    pub fn take(&mut self, var: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads.get_mut(var.id).and_then(|g| g.take())
    }
}

/// Handle to a value on a [`Tape`].
pub struct Var<'t, T> {
    pub(crate) tape: &'t Tape<T>,
    pub(crate) id: usize,
}

impl<T> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T> Copy for Var<'_, T> {}

impl<T: Float> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var").field("id", &self.id).field("shape", &self.shape()).finish()
    }
}

impl<'t, T: Float> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    fn node(&self) -> Ref<'t, Node<T>> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id])
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.node().value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.node().value.shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.node().value.numel()
    }

    pub fn requires_grad(&self) -> bool {
        self.node().requires_grad
    }

    /// Scalar value of a one-element variable.
    pub fn item(&self) -> T {
        self.node().value.item()
    }

    /// Same value, cut from the graph.
    pub fn detach(self) -> Var<'t, T> {
        let value = self.value();
        self.tape.push(value, Vec::new(), None, false)
    }

    pub(crate) fn record(self, value: Tensor<T>, parents: &[Var<'t, T>], backward: impl Fn(&Tensor<T>) -> Vec<Option<Tensor<T>>> + 'static) -> Var<'t, T> {
        self.tape.custom(value, parents, backward)
    }

    pub(crate) fn same_tape(self, other: Var<'t, T>, op: &'static str) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(TensorError::contract(op, "operands live on different tapes"))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constants_do_not_record_backward() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::scalar(2.0));
        let b = a.mul(a).unwrap();
        assert!(!b.requires_grad());
        let g = tape.backward(b).unwrap();
        assert!(g.get(a).is_none());
    }

    #[test]
    fn shared_input_accumulates() {
        let tape = Tape::<f64>::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = x.mul(x).unwrap().add(x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 7.0);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let tape = Tape::<f32>::new();
        let x = tape.param(Tensor::ones(vec![3]));
        assert!(tape.backward(x.relu()).is_err());
    }
}
