use std::cell::Cell;
use std::fmt;
use std::sync::{Arc, Mutex, MutexGuard};

use crate::element::Element;
use crate::error::{invalid, Result};

/// Inputs handed to an operation's backward closure.
pub struct BackwardArgs<'a, T> {
    /// Gradient of the loss with respect to the op's output.
    pub grad: &'a [T],
    /// The op's forward output.
    pub out: &'a [T],
    /// Which inputs need a gradient, indexed like `Node::inputs`.
    pub needs: &'a [bool],
}

pub(crate) type BackwardFn<T> =
    Box<dyn Fn(&BackwardArgs<'_, T>) -> Vec<Option<Vec<T>>> + Send + Sync>;

pub(crate) struct Node<T: Element> {
    pub(crate) op: &'static str,
    pub(crate) inputs: Vec<Tensor<T>>,
    pub(crate) backward: BackwardFn<T>,
}

pub(crate) struct Inner<T: Element> {
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Vec<T>,
    pub(crate) grad: Mutex<Option<Vec<T>>>,
    pub(crate) requires_grad: bool,
    pub(crate) node: Option<Node<T>>,
}

/// An N-dimensional row-major array that can take part in a computation graph.
///
/// Cloning is cheap (reference counted). Data is immutable after creation;
/// only the gradient buffer changes, and only through [`Tensor::backward`]
/// or [`Tensor::zero_grad`].
pub struct Tensor<T: Element>(pub(crate) Arc<Inner<T>>);

impl<T: Element> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(Arc::clone(&self.0))
    }
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = f.debug_struct("Tensor");
        s.field("shape", &self.0.shape)
            .field("dtype", &T::NAME)
            .field("requires_grad", &self.0.requires_grad);
        if let Some(node) = &self.0.node {
            s.field("op", &node.op);
        }
        if self.numel() <= 16 {
            s.field("data", &self.0.data);
        }
        s.finish()
    }
}

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Whether operations on this thread currently record graph nodes.
pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Disables graph recording on the current thread until dropped.
pub struct NoGradGuard {
    prev: bool,
}

impl NoGradGuard {
    pub fn new() -> Self {
        let prev = GRAD_ENABLED.with(|g| g.replace(false));
        NoGradGuard { prev }
    }
}

impl Default for NoGradGuard {
    fn default() -> Self {
        Self::new()
    }
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.prev));
    }
}

/// Runs `f` with graph recording disabled.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let _guard = NoGradGuard::new();
    f()
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Element> Tensor<T> {
    fn build(shape: Vec<usize>, data: Vec<T>, requires_grad: bool, node: Option<Node<T>>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor(Arc::new(Inner {
            shape,
            data,
            grad: Mutex::new(None),
            requires_grad,
            node,
        }))
    }

    /// Creates an untracked tensor. Fails if `data.len()` does not match `shape`.
    pub fn from_vec(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if shape.contains(&0) {
            return Err(invalid(
                "from_vec",
                format!("zero-sized dimension in {shape:?}"),
            ));
        }
        if numel(&shape) != data.len() {
            return Err(invalid(
                "from_vec",
                format!(
                    "shape {shape:?} needs {} elements, got {}",
                    numel(&shape),
                    data.len()
                ),
            ));
        }
        Ok(Self::build(shape, data, false, None))
    }

    /// Creates a leaf that accumulates gradients during [`Tensor::backward`].
    pub fn param(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let t = Self::from_vec(shape, data)?;
        Ok(t.into_param())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        Self::build(shape, vec![value; n], false, None)
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self::build(vec![1], vec![value], false, None)
    }

    /// Result of an operation. Records a graph node when recording is enabled
    /// and some input requires a gradient.
    pub(crate) fn from_op(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<T>,
        inputs: Vec<Tensor<T>>,
        backward: BackwardFn<T>,
    ) -> Self {
        let track = grad_enabled() && inputs.iter().any(|t| t.requires_grad());
        if track {
            Self::build(
                shape,
                data,
                true,
                Some(Node {
                    op,
                    inputs,
                    backward,
                }),
            )
        } else {
            Self::build(shape, data, false, None)
        }
    }

    /// Untracked copy sharing nothing with the graph.
    pub fn detach(&self) -> Self {
        Self::build(self.0.shape.clone(), self.0.data.clone(), false, None)
    }

    /// Untracked copy marked as a gradient-accumulating leaf.
    pub fn into_param(self) -> Self {
        let inner = match Arc::try_unwrap(self.0) {
            Ok(inner) => (inner.shape, inner.data),
            Err(shared) => (shared.shape.clone(), shared.data.clone()),
        };
        Self::build(inner.0, inner.1, true, None)
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn ndim(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.0.data.clone()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.numel() != 1 {
            return Err(invalid(
                "item",
                format!("tensor has shape {:?}", self.shape()),
            ));
        }
        Ok(self.0.data[0])
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Name of the producing operation, if this tensor is a graph node.
    pub fn op_name(&self) -> Option<&'static str> {
        self.0.node.as_ref().map(|n| n.op)
    }

    /// Copy of the accumulated gradient, if any backward pass reached this tensor.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.lock_grad().clone()
    }

    pub fn zero_grad(&self) {
        *self.lock_grad() = None;
    }

    pub(crate) fn lock_grad(&self) -> MutexGuard<'_, Option<Vec<T>>> {
        self.0.grad.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Converts element type, producing an untracked tensor.
    pub fn cast<U: Element>(&self) -> Tensor<U> {
        let data = self.0.data.iter().map(|v| U::lit(v.as_f64())).collect();
        Tensor::build(self.0.shape.clone(), data, false, None)
    }

    /// Same tensor identity (not value equality).
    pub fn ptr_eq(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }

    /// Bitwise equality of shape and data.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.shape() == other.shape()
            && self
                .data()
                .iter()
                .zip(other.data())
                .all(|(a, b)| a.to_f64().map(f64::to_bits) == b.to_f64().map(f64::to_bits))
    }
}
