//! Dense row-major tensors with a fixed differentiable op set and
//! reverse-mode gradient accumulation.
//!
//! The value type [`Tensor`] is a plain shape + contiguous buffer. All
//! differentiable computation goes through a [`Graph`], which owns one node
//! per produced tensor and replays the recorded ops in reverse for
//! [`Graph::backward`]. Storage is row-major contiguous; there are no strided
//! views. Broadcasting is limited to leading-dimension expansion (the smaller
//! shape must be a suffix of the larger) and scalar operands.

mod gradcheck;
mod graph;

pub use gradcheck::{finite_diff_check, GradCheckReport, ParamReport};
pub use graph::{Graph, TensorId};

use crate::scalar::Scalar;
use thiserror::Error;

/// Errors produced by tensor construction and graph ops.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected {expected} data elements for shape {shape:?}, got {got}")]
    DataLength {
        op: &'static str,
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("{op}: axis {axis} out of range for rank-{rank} tensor")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("gather_rows: index {index} out of range for {rows} rows")]
    IndexOutOfRange { index: usize, rows: usize },
    #[error("masked_max: group {group} has no valid entries")]
    EmptyGroup { group: usize },
    #[error("{op}: domain error ({detail})")]
    Domain { op: &'static str, detail: String },
    #[error("backward: root must be a scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
}

/// A dense row-major value: `product(shape) == data.len()` always holds.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S: Scalar> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                op: "Tensor::new",
                shape,
                expected,
                got: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![S::zero(); n],
        }
    }

    pub fn scalar(v: S) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_vec(data: Vec<S>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Build from an `f64` slice, casting into the storage precision.
    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self, TensorError> {
        Self::new(shape, data.iter().map(|&x| S::from_f64(x)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Single element of a one-element tensor.
    pub fn item(&self) -> S {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.as_f64()).collect()
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(TensorError::DataLength {
                op: "reshape",
                shape,
                expected,
                got: self.data.len(),
            });
        }
        self.shape = shape;
        Ok(self)
    }
}

/// Integer index matrix used by `gather_rows`; kept outside the scalar type
/// so indices never round-trip through floats.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexMatrix {
    pub rows: usize,
    pub cols: usize,
    pub idx: Vec<usize>,
}

impl IndexMatrix {
    pub fn new(rows: usize, cols: usize, idx: Vec<usize>) -> Self {
        assert_eq!(rows * cols, idx.len());
        Self { rows, cols, idx }
    }

    pub fn at(&self, r: usize, c: usize) -> usize {
        self.idx[r * self.cols + c]
    }
}

/// Boolean mask with an explicit shape, used by `masked_max`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoolMask {
    pub shape: Vec<usize>,
    pub mask: Vec<bool>,
}

impl BoolMask {
    pub fn new(shape: Vec<usize>, mask: Vec<bool>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), mask.len());
        Self { shape, mask }
    }
}
