//! Dense f64 tensors forming a single-use reverse-mode computation graph.
//!
//! A `Tensor` is a cheap handle onto a graph node. Leaves are created with
//! [`Tensor::leaf`] (trainable) or [`Tensor::constant`]; every op in
//! [`crate::ops`] produces a new node that remembers its parents and how to
//! push gradients back to them. Graphs are built per forward pass and
//! consumed by exactly one [`backward`] call.

use std::cell::{Cell, Ref, RefCell};
use std::rc::Rc;

use crate::error::{NumericError, Result};

/// (upstream gradient, this node's own output data)
type BackwardFn = Box<dyn Fn(&[f64], &[f64])>;

pub(crate) struct Inner {
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    parents: Vec<Tensor>,
    backward_fn: Option<BackwardFn>,
    consumed: Cell<bool>,
}

#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

fn check_len(shape: &[usize], len: usize) -> Result<()> {
    let numel: usize = shape.iter().product();
    if numel != len || shape.iter().any(|&d| d == 0) {
        return Err(NumericError::ShapeMismatch {
            context: "tensor construction",
            expected: shape.to_vec(),
            got: vec![len],
        });
    }
    Ok(())
}

impl Tensor {
    /// Trainable or plain leaf node.
    pub fn leaf(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Result<Tensor> {
        check_len(&shape, data.len())?;
        Ok(Tensor {
            inner: Rc::new(Inner {
                shape,
                data: RefCell::new(data),
                requires_grad,
                grad: RefCell::new(None),
                parents: Vec::new(),
                backward_fn: None,
                consumed: Cell::new(false),
            }),
        })
    }

    /// Non-trainable leaf (masks, targets-as-floats, ...).
    pub fn constant(data: Vec<f64>, shape: Vec<usize>) -> Result<Tensor> {
        Tensor::leaf(data, shape, false)
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::leaf(vec![value], vec![1], false).expect("scalar")
    }

    pub fn zeros(shape: Vec<usize>, requires_grad: bool) -> Tensor {
        let n = shape.iter().product();
        Tensor::leaf(vec![0.0; n], shape, requires_grad).expect("zeros")
    }

    pub(crate) fn from_op(
        data: Vec<f64>,
        shape: Vec<usize>,
        parents: Vec<Tensor>,
        backward_fn: Option<BackwardFn>,
    ) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        Tensor {
            inner: Rc::new(Inner {
                shape,
                data: RefCell::new(data),
                requires_grad,
                grad: RefCell::new(None),
                parents,
                backward_fn: if requires_grad { backward_fn } else { None },
                consumed: Cell::new(false),
            }),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.inner.data.borrow()
    }

    /// Copies the data out (convenient at boundaries; cheap at desk scale).
    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.data.borrow().clone()
    }

    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.inner.data.borrow()[0]
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn has_grad(&self) -> bool {
        self.inner.grad.borrow().is_some()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Edits the accumulated gradient in place (e.g. masking a parameter
    /// slice that must stay frozen). No-op when no gradient is present.
    pub fn modify_grad(&self, f: impl FnOnce(&mut [f64])) {
        if let Some(g) = self.inner.grad.borrow_mut().as_mut() {
            f(g);
        }
    }

    /// In-place parameter update, used only by optimizers and loaders.
    pub fn apply_update(&self, f: impl FnOnce(&mut [f64])) {
        f(&mut self.inner.data.borrow_mut());
    }

    pub(crate) fn accumulate_grad(&self, delta: &[f64]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    /// Like `accumulate_grad` but takes ownership, avoiding a copy when this
    /// is the first contribution.
    pub(crate) fn accumulate_grad_owned(&self, delta: Vec<f64>) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(&delta) {
                    *gi += di;
                }
            }
            None => *slot = Some(delta),
        }
    }

    fn key(&self) -> usize {
        Rc::as_ptr(&self.inner) as usize
    }
}

/// Populates `grad` on every `requires_grad` ancestor of `loss` and marks the
/// graph consumed. A second backward through any interior node is rejected.
pub fn backward(loss: &Tensor) -> Result<()> {
    if !loss.is_scalar() {
        return Err(NumericError::NonScalarLoss(loss.shape().to_vec()));
    }
    if loss.inner.consumed.get() {
        return Err(NumericError::GraphConsumed);
    }

    // Iterative post-order DFS over requires_grad ancestry.
    let mut order: Vec<Tensor> = Vec::new();
    let mut visited = std::collections::HashSet::new();
    let mut stack: Vec<(Tensor, bool)> = vec![(loss.clone(), false)];
    while let Some((node, expanded)) = stack.pop() {
        if expanded {
            order.push(node);
            continue;
        }
        if !visited.insert(node.key()) {
            continue;
        }
        if node.inner.backward_fn.is_some() && node.inner.consumed.get() {
            return Err(NumericError::GraphConsumed);
        }
        stack.push((node.clone(), true));
        for p in &node.inner.parents {
            if p.requires_grad() && !visited.contains(&p.key()) {
                stack.push((p.clone(), false));
            }
        }
    }

    loss.accumulate_grad(&[1.0]);
    for node in order.iter().rev() {
        if let Some(f) = &node.inner.backward_fn {
            let upstream = node.inner.grad.borrow_mut().take();
            if let Some(g) = upstream {
                let own = node.inner.data.borrow();
                f(&g, &own);
            }
            node.inner.consumed.set(true);
        }
    }
    loss.inner.consumed.set(true);
    Ok(())
}
