//! Dense row-major `f64` tensors and a tape-based reverse-mode autodiff graph.

mod graph;
pub(crate) mod kernels;

pub use graph::{Graph, NodeId};

use thiserror::Error;

/// Errors raised by tensor construction and graph operations.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch: {left:?} vs {right:?} ({context})")]
    Shape {
        left: Vec<usize>,
        right: Vec<usize>,
        context: &'static str,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("empty normalization dimension")]
    EmptyDimension,
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("index {index} out of range for dimension of size {size}")]
    Index { index: usize, size: usize },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Whether stochastic layers (dropout) are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
            grad: None,
        }
    }

    /// Build a 2-D tensor from nested rows. Panics on ragged input.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor {
            shape: vec![rows.len(), cols],
            data,
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Size of the last dimension (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(TensorError::Shape {
                left: self.shape,
                right: shape,
                context: "reshape",
            });
        }
        self.shape = shape;
        Ok(self)
    }

    /// Plain (non-recorded) matrix product of two 2-D tensors.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.ndim() != 2 || rhs.ndim() != 2 || self.shape[1] != rhs.shape[0] {
            return Err(TensorError::Shape {
                left: self.shape.clone(),
                right: rhs.shape.clone(),
                context: "matmul",
            });
        }
        let (m, k, n) = (self.shape[0], self.shape[1], rhs.shape[1]);
        Ok(Tensor {
            shape: vec![m, n],
            data: kernels::matmul(&self.data, &rhs.data, m, k, n),
            grad: None,
        })
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Bitwise equality of payloads, distinguishing `-0.0` from `0.0`.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}
