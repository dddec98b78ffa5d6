//! Dense row-major f32 tensors and the reverse-mode tape built on them.
//!
//! Tensors are plain value types: a shape, a flat buffer, and an optional
//! gradient buffer. Anything differentiable goes through a [`Tape`]
//! (see [`tape`]), which owns its own copies of the values it touches, so
//! tensors themselves stay immutable-after-construction and safe to share
//! across threads.

mod ops;
pub mod tape;

pub mod io;

pub use tape::{Tape, Val};

use std::fmt;

/// Errors from tensor construction and tensor math.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorError {
    /// Two operands have incompatible shapes for the named op.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A single operand has a shape the op cannot accept.
    InvalidShape { op: &'static str, detail: String },
    /// Constructor data length does not match the shape product.
    DataLength { expected: usize, got: usize },
    /// An op produced NaN/Inf from finite inputs (overflow is an error,
    /// never a silent value).
    NonFinite { op: &'static str },
    /// `backward` was called on a tensor that is not a single element.
    NotScalar { shape: Vec<usize> },
    /// `backward` was called twice on the same tape.
    BackwardConsumed,
    /// A class index is outside `0..num_classes`.
    ClassOutOfRange { class: usize, num_classes: usize },
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: incompatible shapes {lhs:?} vs {rhs:?}")
            }
            Self::InvalidShape { op, detail } => write!(f, "{op}: invalid shape: {detail}"),
            Self::DataLength { expected, got } => {
                write!(f, "data length {got} does not match shape product {expected}")
            }
            Self::NonFinite { op } => write!(f, "{op}: non-finite value in result"),
            Self::NotScalar { shape } => {
                write!(f, "backward requires a single-element tensor, got shape {shape:?}")
            }
            Self::BackwardConsumed => write!(f, "backward already ran on this tape"),
            Self::ClassOutOfRange { class, num_classes } => {
                write!(f, "class index {class} out of range for {num_classes} classes")
            }
        }
    }
}

impl std::error::Error for TensorError {}

/// Dense n-dimensional f32 array in row-major order.
///
/// Invariants: `shape.iter().product() == data.len()`, and `grad`, when
/// present, has the same length as `data`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    requires_grad: bool,
    grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength { expected, got: data.len() });
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n], requires_grad: false, grad: None }
    }

    pub fn filled(shape: Vec<usize>, value: f32) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![value; n], requires_grad: false, grad: None }
    }

    /// Rank-0 scalar.
    pub fn scalar(value: f32) -> Self {
        Tensor { shape: Vec::new(), data: vec![value], requires_grad: false, grad: None }
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> f32) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|i| f(i)).collect();
        Tensor { shape, data, requires_grad: false, grad: None }
    }

    pub fn with_requires_grad(mut self, yes: bool) -> Self {
        self.requires_grad = yes;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Mutable view of the buffer. The shape is fixed, so element-wise
    /// edits cannot break the length invariant.
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f32>) {
        debug_assert_eq!(grad.len(), self.data.len());
        self.grad = Some(grad);
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f32, TensorError> {
        if self.data.len() != 1 {
            return Err(TensorError::NotScalar { shape: self.shape.clone() });
        }
        Ok(self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub(crate) fn check_finite(op: &'static str, data: &[f32]) -> Result<(), TensorError> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}
