//! Reverse-mode autodiff over row-major `f64` tensors.
//!
//! A [`Tensor`] is an immutable value plus an optional record of how it was
//! computed. Ops build a DAG: each result holds handles to its parents and a
//! closure that maps the result's gradient to per-parent gradients.
//! [`Tensor::backward`] walks the DAG once in reverse topological order from
//! a scalar loss and accumulates gradients into every leaf created with
//! [`Tensor::param`].
//!
//! Design choices, deliberately boring:
//!
//! * `f64` everywhere — the kernel is meant to be verified against
//!   finite differences at tight tolerances, not to be fast on GPUs.
//! * Values are immutable; an optimizer step produces new parameter tensors.
//! * Ops only record the graph when gradients are both globally enabled
//!   (see [`no_grad`]) and some input actually needs them, so inference
//!   pays no graph-keeping cost.

mod attention;
mod conv;
mod gradcheck;
mod norm;
mod ops;
mod pool;
mod resize;
#[cfg(test)]
pub(crate) mod testutil;

pub use attention::attention;
pub use gradcheck::{grad_check, GradCheckReport};
pub use pool::PoolKind;
pub(crate) use ops::sigmoid_scalar;

use std::cell::{Cell, RefCell};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` with gradient recording disabled on this thread.
///
/// Ops executed inside behave identically in value but build no graph, which
/// keeps evaluation loops at constant memory.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(false)));
    f()
}

fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Gradient closure: receives the node's output gradient, returns one
/// gradient per parent (in parent order). `None` marks a parent that does
/// not receive gradient through this op (e.g. integer-like inputs).
type BackwardFn = Box<dyn Fn(&[f64]) -> Vec<Option<Vec<f64>>>>;

struct Inner {
    id: u64,
    shape: Vec<usize>,
    // Shared so that detach() and backward closures that reuse forward
    // results (sigmoid, softmax, ...) never copy the buffer.
    data: Rc<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

/// An immutable n-dimensional `f64` array participating in a gradient DAG.
///
/// Cloning is cheap (reference-counted). Equality of handles is identity,
/// not value; compare [`Tensor::data`] for values.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

impl Tensor {
    fn new_inner(
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
        parents: Vec<Tensor>,
        backward: Option<BackwardFn>,
    ) -> Tensor {
        Tensor::from_shared(shape, Rc::new(data), requires_grad, parents, backward)
    }

    fn from_shared(
        shape: Vec<usize>,
        data: Rc<Vec<f64>>,
        requires_grad: bool,
        parents: Vec<Tensor>,
        backward: Option<BackwardFn>,
    ) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                grad: RefCell::new(None),
                requires_grad,
                parents,
                backward,
            }),
        }
    }

    /// Builds a constant (non-trainable) tensor, validating that `data`
    /// matches the requested shape.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "from_vec",
                format!("shape {:?} wants {} values, got {}", shape, numel, data.len()),
            ));
        }
        Ok(Tensor::new_inner(shape.to_vec(), data, false, Vec::new(), None))
    }

    /// Builds a trainable leaf. Gradients accumulate here during
    /// [`Tensor::backward`].
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "param",
                format!("shape {:?} wants {} values, got {}", shape, numel, data.len()),
            ));
        }
        Ok(Tensor::new_inner(shape.to_vec(), data, true, Vec::new(), None))
    }

    /// All-zero constant tensor.
    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::new_inner(
            shape.to_vec(),
            vec![0.0; shape.iter().product()],
            false,
            Vec::new(),
            None,
        )
    }

    /// Constant tensor filled with `value`.
    pub fn full(shape: &[usize], value: f64) -> Tensor {
        Tensor::new_inner(
            shape.to_vec(),
            vec![value; shape.iter().product()],
            false,
            Vec::new(),
            None,
        )
    }

    /// Rank-0-like scalar (shape `[1]`).
    pub fn scalar(value: f64) -> Tensor {
        Tensor::new_inner(vec![1], vec![value], false, Vec::new(), None)
    }

    /// Result of an op: records parents and the gradient closure only when
    /// recording is on and some parent participates in differentiation.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Tensor {
        Tensor::from_op_shared(shape, Rc::new(data), parents, backward)
    }

    /// Like [`Tensor::from_op`] for ops whose backward closure reuses the
    /// forward result (pass the same `Rc` to both to avoid a copy).
    pub(crate) fn from_op_shared(
        shape: Vec<usize>,
        data: Rc<Vec<f64>>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Tensor {
        if grad_enabled() && parents.iter().any(Tensor::needs_grad) {
            Tensor::from_shared(shape, data, false, parents, Some(backward))
        } else {
            Tensor::from_shared(shape, data, false, Vec::new(), None)
        }
    }

    /// Stable identity of this node within the process.
    pub fn id(&self) -> u64 {
        self.inner.id
    }

    /// Tensor shape (row-major layout).
    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    /// Number of elements.
    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    /// Raw row-major values.
    pub fn data(&self) -> &[f64] {
        &self.inner.data
    }

    /// Whether this is a trainable leaf.
    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Whether gradients must flow to or through this node.
    pub fn needs_grad(&self) -> bool {
        self.inner.requires_grad || self.inner.backward.is_some()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::shape(
                "item",
                format!("expected 1 element, tensor has shape {:?}", self.shape()),
            ));
        }
        Ok(self.inner.data[0])
    }

    /// Element accessor by multi-index (for tests and small readers).
    pub fn at(&self, index: &[usize]) -> f64 {
        assert_eq!(index.len(), self.inner.shape.len(), "index rank mismatch");
        let mut flat = 0;
        for (i, (&ix, &dim)) in index.iter().zip(&self.inner.shape).enumerate() {
            assert!(ix < dim, "index {} out of bounds at axis {}", ix, i);
            flat = flat * dim + ix;
        }
        self.inner.data[flat]
    }

    /// Accumulated gradient of a leaf after [`Tensor::backward`], if any.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    /// Clears this node's accumulated gradient.
    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Returns a constant leaf sharing this tensor's values, cut off from
    /// the graph. Gradients never flow through a detached tensor.
    pub fn detach(&self) -> Tensor {
        Tensor::from_shared(
            self.inner.shape.clone(),
            Rc::clone(&self.inner.data),
            false,
            Vec::new(),
            None,
        )
    }

    /// Shared handle to the underlying buffer (for backward closures that
    /// reuse the forward result).
    pub(crate) fn data_rc(&self) -> Rc<Vec<f64>> {
        Rc::clone(&self.inner.data)
    }

    /// True when every element is finite.
    pub fn is_finite(&self) -> bool {
        self.inner.data.iter().all(|v| v.is_finite())
    }

    fn accumulate_grad(&self, g: &[f64]) {
        debug_assert_eq!(g.len(), self.numel());
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Runs reverse-mode differentiation from a scalar output.
    ///
    /// Gradients accumulate into every reachable leaf built with
    /// [`Tensor::param`]; intermediate gradients are dropped as soon as
    /// their consumers are done. Calling `backward` twice without
    /// [`Tensor::zero_grad`] adds gradients, matching the usual convention.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("output must be scalar, got shape {:?}", self.shape()),
            ));
        }
        let order = self.topo_order();
        self.accumulate_grad(&[1.0]);
        for node in order.iter().rev() {
            let Some(backward) = node.inner.backward.as_ref() else {
                continue;
            };
            // A node may be unreachable from the gradient side (e.g. behind
            // a detach); it then simply never receives a gradient.
            let grad_out = { node.inner.grad.borrow().clone() };
            let Some(grad_out) = grad_out else { continue };
            let parent_grads = backward(&grad_out);
            debug_assert_eq!(parent_grads.len(), node.inner.parents.len());
            for (parent, grad) in node.inner.parents.iter().zip(parent_grads) {
                if let Some(grad) = grad {
                    if parent.needs_grad() {
                        parent.accumulate_grad(&grad);
                    }
                }
            }
            if !node.inner.requires_grad {
                *node.inner.grad.borrow_mut() = None;
            }
        }
        Ok(())
    }

    /// Post-order over the ancestor DAG (leaves first, `self` last).
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut seen: HashSet<u64> = HashSet::new();
        // (node, expanded): two-phase iterative DFS to avoid recursion on
        // deep graphs.
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !seen.insert(node.inner.id) {
                continue;
            }
            stack.push((node.clone(), true));
            for parent in &node.inner.parents {
                if !seen.contains(&parent.inner.id) {
                    stack.push((parent.clone(), false));
                }
            }
        }
        order
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .field("recorded", &self.inner.backward.is_some())
            .finish()
    }
}
