//! Dense row-major tensors with a dynamic reverse-mode differentiation graph.
//!
//! Every operation that consumes a tensor with `requires_grad` set records a
//! node holding its inputs and a backward closure, unless a [`no_grad`] scope
//! is active. [`Tensor::backward`] walks the graph once, in reverse creation
//! order, and frees it as it goes.

mod census;
mod element;
mod ops;
mod param;

use std::cell::Cell;
use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};

pub use census::{census, Census, CensusEntry, CensusKind};
pub use element::{DType, Element};
pub use param::{Parameter, ParameterSet};

pub(crate) use census::record_saved;

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static NO_GRAD_DEPTH: Cell<usize> = const { Cell::new(0) };
}

/// True unless the current thread is inside a [`no_grad`] scope.
pub fn is_grad_enabled() -> bool {
    NO_GRAD_DEPTH.with(|d| d.get() == 0)
}

struct NoGradGuard;

impl NoGradGuard {
    fn enter() -> Self {
        NO_GRAD_DEPTH.with(|d| d.set(d.get() + 1));
        NoGradGuard
    }
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        NO_GRAD_DEPTH.with(|d| d.set(d.get() - 1));
    }
}

/// Runs `f` with graph recording disabled. Scopes nest.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let _guard = NoGradGuard::enter();
    f()
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Arguments handed to a backward closure.
pub(crate) struct BackwardArgs<'a, T: Element> {
    /// Gradient of the loss w.r.t. the op output.
    pub grad: &'a [T],
    pub inputs: &'a [Tensor<T>],
    pub output: &'a [T],
    /// Which inputs need a gradient; closures may skip the others.
    pub needs: &'a [bool],
}

pub(crate) type BackwardFn<T> =
    Box<dyn Fn(&BackwardArgs<'_, T>) -> Vec<Option<Vec<T>>> + Send + Sync>;

struct Node<T: Element> {
    inputs: Vec<Tensor<T>>,
    backward: BackwardFn<T>,
}

struct Inner<T: Element> {
    id: u64,
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    /// Set when the tensor was produced by a recorded op (even after the node is freed).
    recorded: bool,
    op: &'static str,
    node: Mutex<Option<Node<T>>>,
    grad: Mutex<Option<Vec<T>>>,
}

/// A cheaply clonable handle to an immutable n-d array.
pub struct Tensor<T: Element = f64> {
    inner: Arc<Inner<T>>,
}

impl<T: Element> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Arc::clone(&self.inner),
        }
    }
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = f.debug_struct("Tensor");
        s.field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .field("op", &self.inner.op);
        if self.numel() <= 16 {
            s.field("data", &self.inner.data);
        }
        s.finish()
    }
}

fn lock<X>(m: &Mutex<X>) -> MutexGuard<'_, X> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

impl<T: Element> Tensor<T> {
    fn build(
        shape: Vec<usize>,
        data: Vec<T>,
        requires_grad: bool,
        op: &'static str,
        node: Option<Node<T>>,
    ) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        let recorded = node.is_some();
        Tensor {
            inner: Arc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                requires_grad,
                recorded,
                op,
                node: Mutex::new(node),
                grad: Mutex::new(None),
            }),
        }
    }

    /// A constant tensor (no gradient tracking).
    pub fn from_vec(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::InvalidShape {
                op: "from_vec",
                msg: format!("shape {shape:?} needs {} elements, got {}", numel(&shape), data.len()),
            });
        }
        Ok(Self::build(shape, data, false, "const", None))
    }

    /// A leaf that accumulates gradients.
    pub fn leaf(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::InvalidShape {
                op: "leaf",
                msg: format!("shape {shape:?} needs {} elements, got {}", numel(&shape), data.len()),
            });
        }
        Ok(Self::build(shape, data, true, "leaf", None))
    }

    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::from_vec(shape, data.iter().map(|&v| T::from_f64(v)).collect())
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Self::build(shape, vec![T::zero(); n], false, "const", None)
    }

    pub fn full(shape: Vec<usize>, value: T) -> Self {
        let n = numel(&shape);
        Self::build(shape, vec![value; n], false, "const", None)
    }

    pub fn scalar(value: T) -> Self {
        Self::build(Vec::new(), vec![value], false, "const", None)
    }

    /// Output of an operation. Records a graph node when any input tracks
    /// gradients and recording is enabled.
    pub(crate) fn from_op<F>(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<T>,
        inputs: Vec<Tensor<T>>,
        backward: F,
    ) -> Self
    where
        F: Fn(&BackwardArgs<'_, T>) -> Vec<Option<Vec<T>>> + Send + Sync + 'static,
    {
        let track = is_grad_enabled() && inputs.iter().any(|t| t.requires_grad());
        census::record_output(op, data.len(), T::BYTES, track);
        let node = track.then(|| Node {
            inputs,
            backward: Box::new(backward),
        });
        Self::build(shape, data, track, op, node)
    }

    /// Output of a non-differentiable operation.
    pub(crate) fn from_op_const(op: &'static str, shape: Vec<usize>, data: Vec<T>) -> Self {
        census::record_output(op, data.len(), T::BYTES, false);
        Self::build(shape, data, false, op, None)
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn ndim(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.inner.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.inner.data.clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.inner.data.iter().map(|v| v.as_f64()).collect()
    }

    /// Name of the producing operation (`"const"`/`"leaf"` for sources).
    pub fn op_name(&self) -> &'static str {
        self.inner.op
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        !self.inner.recorded
    }

    /// True while this tensor still links into an unconsumed graph.
    pub fn has_graph(&self) -> bool {
        lock(&self.inner.node).is_some()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on a tensor of shape {:?}", self.shape());
        self.inner.data[0]
    }

    /// Accumulated gradient of a leaf, if any backward reached it.
    pub fn grad(&self) -> Option<Vec<T>> {
        lock(&self.inner.grad).clone()
    }

    pub fn zero_grad(&self) {
        let mut g = lock(&self.inner.grad);
        if let Some(buf) = g.as_mut() {
            buf.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Tensor<T> {
        Self::build(self.shape().to_vec(), self.to_vec(), false, "detach", None)
    }

    fn accumulate_grad(&self, g: &[T]) {
        let mut slot = lock(&self.inner.grad);
        match slot.as_mut() {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Back-propagates from this scalar, adding d(self)/d(leaf) into every
    /// reachable leaf that requires gradients. The graph is consumed.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        if !self.inner.recorded {
            self.accumulate_grad(&[T::one()]);
            return Ok(());
        }

        // Collect every still-linked node reachable from the loss. Ids grow
        // with creation time, so descending id order is a reverse topological order.
        let mut pending: BTreeMap<u64, Tensor<T>> = BTreeMap::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if pending.contains_key(&t.id()) {
                continue;
            }
            {
                let node = lock(&t.inner.node);
                let Some(node) = node.as_ref() else {
                    return Err(Error::GraphConsumed);
                };
                for input in &node.inputs {
                    if input.inner.recorded && !pending.contains_key(&input.id()) {
                        stack.push(input.clone());
                    }
                }
            }
            pending.insert(t.id(), t);
        }

        let mut grads: HashMap<u64, Vec<T>> = HashMap::new();
        grads.insert(self.id(), vec![T::one()]);
        while let Some((id, t)) = pending.pop_last() {
            let node = lock(&t.inner.node).take();
            let (Some(node), Some(grad)) = (node, grads.remove(&id)) else {
                continue;
            };
            let needs: Vec<bool> = node.inputs.iter().map(|i| i.requires_grad()).collect();
            let input_grads = (node.backward)(&BackwardArgs {
                grad: &grad,
                inputs: &node.inputs,
                output: t.data(),
                needs: &needs,
            });
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for (input, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !input.requires_grad() {
                    continue;
                }
                debug_assert_eq!(g.len(), input.numel());
                if input.inner.recorded {
                    match grads.get_mut(&input.id()) {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                        None => {
                            grads.insert(input.id(), g);
                        }
                    }
                } else {
                    input.accumulate_grad(&g);
                }
            }
        }
        Ok(())
    }
}
