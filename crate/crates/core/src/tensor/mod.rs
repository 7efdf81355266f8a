//! Minimal reverse-mode automatic differentiation engine.
//!
//! Tensors are dense row-major `f64` arrays behind a shared handle. Ops are
//! recorded on an explicit [`Tape`] which is rebuilt every training step and
//! cleared after backward. Single-threaded per tape.

mod grad_check;
mod ops;

pub use grad_check::{grad_check, grad_check_sampled, GradCheckReport};
pub use ops::{argmax, detach};

use std::cell::{Ref, RefCell};
use std::rc::Rc;

use crate::error::{Error, Result};

struct TensorData {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

/// Shared handle to a dense tensor. Cloning is cheap and aliases storage.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<RefCell<TensorData>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            values.len(),
            "shape/value length mismatch"
        );
        Tensor {
            inner: Rc::new(RefCell::new(TensorData {
                shape,
                values,
                grad: None,
                requires_grad: false,
            })),
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape, vec![0.0; n])
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::new(vec![1], vec![v])
    }

    pub fn param(shape: Vec<usize>, values: Vec<f64>) -> Self {
        let t = Tensor::new(shape, values);
        t.set_requires_grad(true);
        t
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().values.len()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.borrow().values.clone()
    }

    pub fn item(&self) -> f64 {
        let d = self.inner.borrow();
        assert_eq!(d.values.len(), 1, "item() on non-scalar tensor");
        d.values[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    pub fn set_requires_grad(&self, rg: bool) {
        self.inner.borrow_mut().requires_grad = rg;
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// Overwrite values in place, keeping the handle (and shape) intact.
    pub fn set_values(&self, values: &[f64]) {
        let mut d = self.inner.borrow_mut();
        assert_eq!(d.values.len(), values.len());
        d.values.copy_from_slice(values);
    }

    pub fn values(&self) -> Ref<'_, Vec<f64>> {
        Ref::map(self.inner.borrow(), |d| &d.values)
    }

    pub fn ptr_eq(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    pub fn ptr_id(&self) -> usize {
        Rc::as_ptr(&self.inner) as usize
    }

    /// Accumulate a gradient contribution. Tensors that do not require
    /// gradients never receive writes.
    pub(crate) fn accumulate_grad(&self, contrib: &[f64]) {
        let mut d = self.inner.borrow_mut();
        if !d.requires_grad {
            return;
        }
        debug_assert_eq!(d.values.len(), contrib.len());
        match &mut d.grad {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contrib) {
                    *gi += ci;
                }
            }
            None => d.grad = Some(contrib.to_vec()),
        }
    }
}

type BackwardFn = Box<dyn Fn(&[f64], &[Tensor])>;

struct Node {
    inputs: Vec<Tensor>,
    output: Tensor,
    backward: BackwardFn,
}

/// Explicit per-step operation tape. Recorded nodes are in topological order.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Drop all recorded nodes. Leaf gradients are untouched.
    pub fn clear(&self) {
        self.nodes.borrow_mut().clear();
    }

    pub(crate) fn record(
        &self,
        inputs: &[&Tensor],
        out_shape: Vec<usize>,
        out_values: Vec<f64>,
        backward: BackwardFn,
    ) -> Tensor {
        let out = Tensor::new(out_shape, out_values);
        if inputs.iter().any(|t| t.requires_grad()) {
            out.set_requires_grad(true);
            self.nodes.borrow_mut().push(Node {
                inputs: inputs.iter().map(|t| (*t).clone()).collect(),
                output: out.clone(),
                backward,
            });
        }
        out
    }

    /// Reverse sweep from a scalar loss. Populates grad buffers of every
    /// requires-grad ancestor; repeated calls accumulate into leaves.
    pub fn backward(&self, loss: &Tensor) -> Result<()> {
        if loss.numel() != 1 {
            return Err(Error::NonScalarLoss);
        }
        let nodes = self.nodes.borrow();
        let on_tape = nodes.iter().any(|n| n.output.ptr_eq(loss));
        if !on_tape {
            return Err(Error::NoTape);
        }
        // Intermediate grads are scratch space for this sweep only.
        for n in nodes.iter() {
            n.output.zero_grad();
        }
        loss.accumulate_grad(&[1.0]);
        for n in nodes.iter().rev() {
            let g = n.output.grad();
            if let Some(g) = g {
                (n.backward)(&g, &n.inputs);
            }
        }
        Ok(())
    }
}

/// Integer matrix of token ids, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<u32>,
}

impl IdMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<u32>) -> Self {
        assert_eq!(rows * cols, data.len());
        IdMatrix { rows, cols, data }
    }

    pub fn get(&self, r: usize, c: usize) -> u32 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[u32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Boolean matrix, row-major (true = position is real, false = pad).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, data: Vec<bool>) -> Self {
        assert_eq!(rows * cols, data.len());
        Mask { rows, cols, data }
    }

    pub fn all_true(rows: usize, cols: usize) -> Self {
        Mask::new(rows, cols, vec![true; rows * cols])
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[bool] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}
