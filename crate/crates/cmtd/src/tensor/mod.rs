//! Dense tensors with recorded-tape reverse-mode differentiation.
//!
//! The engine is deliberately small: `f64` storage, row-major layout,
//! ranks 1 through 4, and exactly the operation set the classifiers and
//! attack solvers need. Every operation has a forward rule and a gradient
//! rule; the gradient rules are validated against central finite
//! differences (see [`check`]).

mod kernels;
mod tape;

pub mod check;

pub use tape::{GradientMap, NodeId, OpKind, Padding, Tape};

use thiserror::Error;

/// Errors produced by tensor construction and tape operations.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape {shape:?} holds {expected} values, got {actual}")]
    ShapeLengthMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("rank {0} unsupported (expected 1..=4)")]
    RankUnsupported(usize),
    #[error("{op} rejected input shapes {shapes:?}: {reason}")]
    ShapeMismatch {
        op: String,
        shapes: Vec<Vec<usize>>,
        reason: String,
    },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: String },
    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalarBackward(Vec<usize>),
    #[error("tensor is not recorded on this tape")]
    NotOnTape,
    #[error("invalid op parameter for {op}: {reason}")]
    BadParameter { op: String, reason: String },
}

/// N-dimensional `f64` array, row-major. A tensor may carry a tape handle
/// (`node`) when it was produced by or registered on a [`Tape`].
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
    node: Option<NodeId>,
}

impl Tensor {
    /// Builds a tensor, checking that the shape matches the value count.
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self, TensorError> {
        if shape.is_empty() || shape.len() > 4 {
            return Err(TensorError::RankUnsupported(shape.len()));
        }
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(TensorError::ShapeLengthMismatch {
                shape,
                expected,
                actual: values.len(),
            });
        }
        Ok(Self {
            shape,
            values,
            requires_grad: false,
            node: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n]).expect("zeros: shape product")
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![value; n]).expect("filled: shape product")
    }

    /// Rank-1 single-element tensor; the engine's scalar representation.
    pub fn scalar(value: f64) -> Self {
        Self::new(vec![1], vec![value]).expect("scalar")
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        let n = values.len();
        Self::new(vec![n], values).expect("from_vec")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        // mutation detaches the tensor from any recorded graph
        self.node = None;
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.values.len() == 1
    }

    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.values[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    pub(crate) fn with_node(mut self, node: NodeId, requires_grad: bool) -> Self {
        self.node = Some(node);
        self.requires_grad = requires_grad;
        self
    }

    /// Drops the tape handle, leaving a plain value.
    pub fn detached(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            values: self.values.clone(),
            requires_grad: false,
            node: None,
        }
    }

    /// Index of the largest value in a rank-1 tensor or a row of a rank-2
    /// tensor. Ties resolve to the lowest index.
    pub fn argmax_row(&self, row: usize) -> usize {
        let cols = *self.shape.last().expect("nonempty shape");
        let start = row * cols;
        let slice = &self.values[start..start + cols];
        let mut best = 0usize;
        for (i, &v) in slice.iter().enumerate() {
            if v > slice[best] {
                best = i;
            }
        }
        best
    }

    /// Leading extent; the batch size for batched layouts.
    pub fn batch_len(&self) -> usize {
        self.shape[0]
    }

    /// Squared L2 distance to another tensor of the same shape.
    pub fn l2_distance(&self, other: &Tensor) -> f64 {
        debug_assert_eq!(self.shape, other.shape);
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    /// L∞ distance to another tensor of the same shape.
    pub fn linf_distance(&self, other: &Tensor) -> f64 {
        debug_assert_eq!(self.shape, other.shape);
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Extracts row `i` of a batched tensor as a rank-preserving slice
    /// with leading extent 1.
    pub fn slice_batch(&self, index: usize) -> Tensor {
        let per = self.len() / self.shape[0];
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Tensor::new(shape, self.values[index * per..(index + 1) * per].to_vec())
            .expect("slice_batch shape")
    }

    /// Concatenates tensors along the leading axis. All inputs must share
    /// trailing extents.
    pub fn stack_batch(parts: &[Tensor]) -> Result<Tensor, TensorError> {
        let first = parts.first().ok_or(TensorError::RankUnsupported(0))?;
        let mut shape = first.shape.clone();
        let mut values = Vec::with_capacity(parts.iter().map(Tensor::len).sum());
        let mut total = 0usize;
        for p in parts {
            if p.shape[1..] != shape[1..] {
                return Err(TensorError::ShapeMismatch {
                    op: "stack_batch".into(),
                    shapes: parts.iter().map(|t| t.shape.clone()).collect(),
                    reason: "trailing extents differ".into(),
                });
            }
            total += p.shape[0];
            values.extend_from_slice(&p.values);
        }
        shape[0] = total;
        Tensor::new(shape, values)
    }
}

/// One-hot encodes labels into an (N, class_count) tensor.
pub fn one_hot(labels: &[u8], class_count: usize) -> Tensor {
    let mut values = vec![0.0; labels.len() * class_count];
    for (i, &label) in labels.iter().enumerate() {
        values[i * class_count + label as usize] = 1.0;
    }
    Tensor::new(vec![labels.len(), class_count], values).expect("one_hot shape")
}
