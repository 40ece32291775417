//! Reverse-mode autodiff over a Wengert tape.
//!
//! A [`Tape`] records one forward pass; [`Var`]s are cheap handles into it.
//! Each recorded node keeps its forward value and a closure that routes an
//! incoming output gradient to the node's parents. `backward` walks the tape
//! in reverse creation order (a valid topological order by construction) and
//! accumulates per-node gradients.
//!
//! Tapes are single-threaded; independent tapes (one per client step) may run
//! concurrently since they share nothing.

use alloc::boxed::Box;
use alloc::rc::Rc;
use alloc::vec::Vec;
use core::cell::RefCell;

use crate::error::{contract, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Routes the gradient w.r.t. a node's output into contributions for its
/// parents: the closure calls `sink(parent_id, contribution)`.
type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &mut dyn FnMut(usize, Tensor<T>))>;

struct Node<T: Real> {
    value: Rc<Tensor<T>>,
    back: Option<BackwardFn<T>>,
}

/// Records a single forward pass.
pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()) }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Lifts a tensor onto the tape. Leaves have no backward rule; gradients
    /// simply accumulate on them.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, None)
    }

    /// Alias for [`Tape::leaf`]; constants are leaves whose gradient is never
    /// queried.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value)
    }

    pub(crate) fn push(&self, value: Tensor<T>, back: Option<BackwardFn<T>>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), back });
        Var { tape: self, id: nodes.len() - 1 }
    }

    pub(crate) fn value_of(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Reverse pass from a scalar loss. Every node reachable from `loss` gets
    /// a gradient; unreachable nodes report zeros via [`Gradients::wrt`].
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let loss_value = &nodes[loss.id].value;
        if !loss_value.is_scalar() {
            return Err(contract(
                "backward",
                alloc::format!("loss must be scalar, got shape {:?}", loss_value.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(loss_value.shape().to_vec(), T::one()));

        for id in (0..=loss.id).rev() {
            let Some(back) = nodes[id].back.as_ref() else { continue };
            // Take the node's gradient out; contributions only ever flow to
            // parents, which have strictly smaller ids.
            let Some(grad_out) = grads[id].take() else { continue };
            back(&grad_out, &mut |parent, contribution| {
                debug_assert!(parent < id, "tape order violated");
                debug_assert_eq!(contribution.shape(), nodes[parent].value.shape());
                match &mut grads[parent] {
                    Some(g) => g.accumulate(&contribution),
                    slot @ None => *slot = Some(contribution),
                }
            });
            grads[id] = Some(grad_out);
        }
        Ok(Gradients { grads })
    }
}

/// Handle to a tape node.
#[derive(Clone, Copy)]
pub struct Var<'t, T: Real> {
    pub(crate) tape: &'t Tape<T>,
    pub(crate) id: usize,
}

impl<'t, T: Real> Var<'t, T> {
    /// The node's forward value (shared, cheap to clone).
    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub(crate) fn same_tape(&self, other: &Var<'t, T>) -> bool {
        core::ptr::eq(self.tape, other.tape)
    }
}

/// Per-node gradients produced by one backward pass.
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient w.r.t. `v` if the loss reached it.
    pub fn wrt(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient w.r.t. `v`, zeros when the loss did not reach it.
    pub fn wrt_or_zeros(&self, v: Var<'_, T>) -> Tensor<T> {
        match self.wrt(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(v.value().shape().to_vec()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    #[test]
    fn quadratic_gradient() {
        // loss = sum(p ⊙ p), p = [1, 2] -> grad [2, 4]
        let tape: Tape<f64> = Tape::new();
        let p = tape.leaf(Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap());
        let loss = p.mul(p).unwrap().sum_all().unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(p).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn unreachable_parameter_gets_zero_gradient() {
        let tape: Tape<f64> = Tape::new();
        let p = tape.leaf(Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap());
        let q = tape.leaf(Tensor::from_vec(vec![3], vec![5.0, 6.0, 7.0]).unwrap());
        let loss = p.mul(p).unwrap().sum_all().unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.wrt(q).is_none());
        assert_eq!(grads.wrt_or_zeros(q).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let tape: Tape<f64> = Tape::new();
        let p = tape.leaf(Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap());
        let loss = p.mul(p).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::Contract { .. })));
    }

    #[test]
    fn gradient_accumulates_over_reuse() {
        // loss = sum(p + p) -> grad = 2 everywhere
        let tape: Tape<f64> = Tape::new();
        let p = tape.leaf(Tensor::from_vec(vec![3], vec![1.0, -1.0, 0.5]).unwrap());
        let loss = p.add(p).unwrap().sum_all().unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(p).unwrap().data(), &[2.0, 2.0, 2.0]);
    }
}
