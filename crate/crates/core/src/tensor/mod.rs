//! Minimal dense tensor engine with reverse-mode differentiation.
//!
//! Tensors are immutable once created: every primitive allocates a fresh
//! output and (when any input is tracked) records the operation so the
//! backward pass can replay it in reverse. Data buffers are reference
//! counted, so cloning, detaching and reshaping are cheap.
//!
//! Two element types are supported: `f32` for training throughput and
//! `f64` for the verification suites, which need tight tolerances.
//! Every primitive checks its output for NaN/Inf and fails loudly rather
//! than letting a poisoned value propagate.

mod autograd;
mod gradcheck;
pub mod ops;
pub(crate) mod shape;

#[cfg(test)]
mod tests;

pub use autograd::Gradients;
pub use gradcheck::{grad_check, grad_check_params};

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use autograd::Op;

/// Scalar element of a tensor. Implemented for `f32` and `f64`.
pub trait Element:
    Copy
    + PartialOrd
    + std::fmt::Debug
    + Send
    + Sync
    + 'static
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::iter::Sum
{
    fn zero() -> Self;
    fn one() -> Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn is_finite(self) -> bool;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn maximum(self, other: Self) -> Self;
}

macro_rules! impl_element {
    ($t:ty) => {
        impl Element for $t {
            fn zero() -> Self {
                0.0
            }
            fn one() -> Self {
                1.0
            }
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            fn ln(self) -> Self {
                <$t>::ln(self)
            }
            fn tanh(self) -> Self {
                <$t>::tanh(self)
            }
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            fn abs(self) -> Self {
                <$t>::abs(self)
            }
            fn maximum(self, other: Self) -> Self {
                <$t>::max(self, other)
            }
        }
    };
}

impl_element!(f32);
impl_element!(f64);

static NEXT_TENSOR_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_TENSOR_ID.fetch_add(1, Ordering::Relaxed)
}

pub(crate) struct Inner<E: Element> {
    /// Creation-ordered id; along any graph edge the input id is smaller
    /// than the output id, so descending-id order is a reverse topological
    /// order of the graph.
    pub(crate) id: u64,
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Arc<Vec<E>>,
    /// Recorded primitive, present only when some input was tracked.
    pub(crate) op: Option<Op<E>>,
    /// For leaves: whether gradients are requested. Derived tensors set
    /// this iff an op was recorded.
    pub(crate) requires_grad: bool,
}

/// Dense n-dimensional array of real values with optional gradient tracking.
pub struct Tensor<E: Element> {
    pub(crate) inner: Arc<Inner<E>>,
}

impl<E: Element> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Arc::clone(&self.inner),
        }
    }
}

impl<E: Element> std::fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

impl<E: Element> Tensor<E> {
    /// Untracked leaf holding `data` with the given shape.
    pub fn new(data: Vec<E>, shape: &[usize]) -> Result<Self> {
        Self::leaf(data, shape, false)
    }

    /// Tracked leaf: gradients will be reported for this tensor.
    pub fn var(data: Vec<E>, shape: &[usize]) -> Result<Self> {
        Self::leaf(data, shape, true)
    }

    fn leaf(data: Vec<E>, shape: &[usize], requires_grad: bool) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!("zero-sized dimension in {shape:?}")));
        }
        if shape::numel(shape) != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} wants {} values, got {}",
                shape::numel(shape),
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: "leaf",
                detail: format!(" (value {bad:?})"),
            });
        }
        Ok(Tensor {
            inner: Arc::new(Inner {
                id: fresh_id(),
                shape: shape.to_vec(),
                data: Arc::new(data),
                op: None,
                requires_grad,
            }),
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::new(vec![E::zero(); shape::numel(shape)], shape)
    }

    pub fn ones(shape: &[usize]) -> Result<Self> {
        Self::new(vec![E::one(); shape::numel(shape)], shape)
    }

    pub fn full(value: E, shape: &[usize]) -> Result<Self> {
        Self::new(vec![value; shape::numel(shape)], shape)
    }

    pub fn scalar(value: E) -> Result<Self> {
        Self::new(vec![value], &[1])
    }

    /// Result of a primitive. `op` is only kept when an input was tracked.
    pub(crate) fn from_op(
        data: Vec<E>,
        shape: Vec<usize>,
        op: Op<E>,
        op_name: &'static str,
    ) -> Result<Self> {
        debug_assert_eq!(shape::numel(&shape), data.len());
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: op_name,
                detail: format!(" (value {bad:?})"),
            });
        }
        let tracked = op.inputs().iter().any(|t| t.tracked());
        Ok(Tensor {
            inner: Arc::new(Inner {
                id: fresh_id(),
                shape,
                data: Arc::new(data),
                op: if tracked { Some(op) } else { None },
                requires_grad: tracked,
            }),
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.inner.data
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    /// True for tensors that participate in gradient computation, either
    /// as a grad-requiring leaf or as a value derived from one.
    pub fn tracked(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.inner.op.is_none()
    }

    /// Untracked leaf sharing this tensor's buffer. Severs the graph.
    pub fn detach(&self) -> Self {
        Tensor {
            inner: Arc::new(Inner {
                id: fresh_id(),
                shape: self.inner.shape.clone(),
                data: Arc::clone(&self.inner.data),
                op: None,
                requires_grad: false,
            }),
        }
    }

    /// Copy of this tensor's values as a fresh tracked leaf.
    pub fn to_var(&self) -> Result<Self> {
        Self::var(self.data().to_vec(), self.shape())
    }

    /// Element-type conversion (used when moving between the f32 training
    /// path and f64 verification path).
    pub fn cast<F: Element>(&self) -> Result<Tensor<F>> {
        Tensor::<F>::new(
            self.data().iter().map(|v| F::from_f64(v.to_f64())).collect(),
            self.shape(),
        )
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<E> {
        if self.numel() != 1 {
            return Err(Error::shape(format!(
                "item() on tensor of shape {:?}",
                self.shape()
            )));
        }
        Ok(self.inner.data[0])
    }
}
