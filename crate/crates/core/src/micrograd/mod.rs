//! Minimal reverse-mode autodiff on dense f64 tensors.
//!
//! Ops record backward closures on a [`Tape`]; calling [`Tape::backward`] on a
//! scalar loss walks the recorded entries in reverse and accumulates gradients
//! into every participating tensor that requires them. Tensors built with
//! `requires_grad = false` (frozen teacher weights, images, targets) record
//! nothing, so inference pays no tape cost.
//!
//! All shapes are NCHW where four-dimensional. All arithmetic is f64.

pub mod gradcheck;
pub mod matmul;
pub mod ops;
pub mod optim;

use std::cell::{Ref, RefCell, RefMut};
use std::rc::Rc;

use crate::error::{CoreError, Result};

struct Inner {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

/// A shared handle to a dense f64 tensor. Cloning is cheap (reference count).
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<RefCell<Inner>>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>, requires_grad: bool) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(CoreError::Shape(format!(
                "tensor data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Tensor {
            inner: Rc::new(RefCell::new(Inner {
                shape: shape.to_vec(),
                data,
                grad: None,
                requires_grad,
            })),
        })
    }

    pub fn zeros(shape: &[usize], requires_grad: bool) -> Tensor {
        let numel: usize = shape.iter().product();
        Tensor::new(shape, vec![0.0; numel], requires_grad).expect("zeros shape")
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::new(&[1], vec![v], false).expect("scalar")
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    /// Copy of the tensor's data.
    pub fn data(&self) -> Vec<f64> {
        self.inner.borrow().data.clone()
    }

    /// Borrow the data in place (hot paths).
    pub(crate) fn data_ref(&self) -> Ref<'_, [f64]> {
        Ref::map(self.inner.borrow(), |i| i.data.as_slice())
    }

    pub(crate) fn data_mut(&self) -> RefMut<'_, Vec<f64>> {
        RefMut::map(self.inner.borrow_mut(), |i| &mut i.data)
    }

    /// Value of a single-element tensor.
    pub fn value(&self) -> f64 {
        let inner = self.inner.borrow();
        assert_eq!(inner.data.len(), 1, "value() needs a single-element tensor");
        inner.data[0]
    }

    /// Copy of the accumulated gradient, if any backward pass reached this tensor.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.borrow().grad.clone()
    }

    pub fn clear_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// Overwrite the tensor's data in place (same length required).
    pub fn set_data(&self, new: &[f64]) -> Result<()> {
        let mut inner = self.inner.borrow_mut();
        if inner.data.len() != new.len() {
            return Err(CoreError::Shape(format!(
                "set_data length {} != tensor numel {}",
                new.len(),
                inner.data.len()
            )));
        }
        inner.data.copy_from_slice(new);
        Ok(())
    }

    /// Fresh tensor with copied data and no gradient tracking.
    pub fn detach_copy(&self) -> Tensor {
        let inner = self.inner.borrow();
        Tensor::new(&inner.shape, inner.data.clone(), false).expect("detach shape")
    }

    /// True if the two handles point at the same storage.
    pub fn same_storage(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    pub fn all_finite(&self) -> bool {
        self.inner.borrow().data.iter().all(|v| v.is_finite())
    }

    /// Accumulate `delta` into the gradient buffer, allocating zeros on first use.
    pub(crate) fn accumulate_grad(&self, delta: &[f64]) {
        let mut inner = self.inner.borrow_mut();
        let n = inner.data.len();
        debug_assert_eq!(delta.len(), n);
        let grad = inner.grad.get_or_insert_with(|| vec![0.0; n]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += *d;
        }
    }

    /// Run `f` over the gradient buffer, allocating zeros on first use.
    pub(crate) fn with_grad_mut<R>(&self, f: impl FnOnce(&mut [f64]) -> R) -> R {
        let mut inner = self.inner.borrow_mut();
        let n = inner.data.len();
        let grad = inner.grad.get_or_insert_with(|| vec![0.0; n]);
        f(grad)
    }

    fn ensure_finite(&self, ctx: &str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(CoreError::NonFinite(ctx.to_string()))
        }
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.inner.borrow();
        write!(
            f,
            "Tensor{:?} requires_grad={} ({} elems)",
            inner.shape,
            inner.requires_grad,
            inner.data.len()
        )
    }
}

type BackwardFn = Box<dyn Fn()>;

/// Records the backward closures of one forward pass.
#[derive(Default)]
pub struct Tape {
    entries: Vec<BackwardFn>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub(crate) fn record(&mut self, backward: BackwardFn) {
        self.entries.push(backward);
    }

    /// Reverse-mode sweep from a single-element loss. Consumes the tape so a
    /// second sweep cannot double-accumulate gradients.
    pub fn backward(self, loss: &Tensor) -> Result<()> {
        if loss.numel() != 1 {
            return Err(CoreError::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        loss.ensure_finite("loss passed to backward")?;
        loss.with_grad_mut(|g| g[0] += 1.0);
        for entry in self.entries.iter().rev() {
            entry();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_shape_mismatch_rejected() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 5], false).is_err());
    }

    #[test]
    fn backward_requires_scalar() {
        let t = Tensor::zeros(&[2], true);
        let tape = Tape::new();
        assert!(tape.backward(&t).is_err());
    }

    #[test]
    fn detach_copy_is_independent() {
        let t = Tensor::new(&[2], vec![1.0, 2.0], true).unwrap();
        let d = t.detach_copy();
        assert!(!d.requires_grad());
        t.set_data(&[5.0, 6.0]).unwrap();
        assert_eq!(d.data(), vec![1.0, 2.0]);
        assert!(!d.same_storage(&t));
    }
}
