//! Dense f64 tensors and a dynamic tape for reverse-mode differentiation.
//!
//! `Tensor` is a plain value type (row-major data + shape). All differentiable
//! computation goes through a [`Graph`], which records one node per operation
//! and replays the records in reverse for `backward`. Tensors are value-like
//! and freely movable between threads; a `Graph` stays on one thread.

mod graph;
mod gradcheck;

pub use graph::{Graph, NodeId};
pub use gradcheck::grad_check;

use std::fmt;

/// Errors from tensor construction and graph operations.
#[derive(Clone, Debug, PartialEq)]
pub enum TensorError {
    /// Operand shapes are incompatible for the named operation.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// Data length does not match the product of the shape dimensions.
    DataLength { expected: usize, got: usize },
    /// An operation received a tensor of unsupported rank.
    BadRank {
        op: &'static str,
        expected: &'static str,
        got: usize,
    },
    /// A non-finite value was detected where finiteness is required.
    NonFinite { op: &'static str },
    /// `backward` was called on a non-scalar node.
    NonScalarLoss { shape: Vec<usize> },
    /// The graph has already been swept by `backward`.
    GraphConsumed,
    /// An embedding id is out of the table's row range.
    IndexOutOfRange { index: usize, len: usize },
    /// An operation that needs at least one element got none.
    EmptyInput { op: &'static str },
    /// A parameter to an operation is outside its documented domain.
    BadArgument { op: &'static str, detail: String },
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: shape mismatch between {lhs:?} and {rhs:?}")
            }
            TensorError::DataLength { expected, got } => {
                write!(f, "data length {got} does not match shape product {expected}")
            }
            TensorError::BadRank { op, expected, got } => {
                write!(f, "{op}: expected rank {expected}, got rank {got}")
            }
            TensorError::NonFinite { op } => write!(f, "{op}: non-finite value encountered"),
            TensorError::NonScalarLoss { shape } => {
                write!(f, "backward requires a scalar loss, got shape {shape:?}")
            }
            TensorError::GraphConsumed => write!(f, "graph already consumed by backward"),
            TensorError::IndexOutOfRange { index, len } => {
                write!(f, "index {index} out of range for table of {len} rows")
            }
            TensorError::EmptyInput { op } => write!(f, "{op}: empty input"),
            TensorError::BadArgument { op, detail } => write!(f, "{op}: {detail}"),
        }
    }
}

impl std::error::Error for TensorError {}

pub type TensorResult<T> = Result<T, TensorError>;

/// Dense row-major f64 array with shape and an optional gradient accumulator.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> TensorResult<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(TensorError::DataLength {
                expected,
                got: data.len(),
            });
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
            grad: None,
        }
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
            shape: vec![1],
            data: vec![value],
            grad: None,
        }
    }

    /// n-by-n identity matrix.
    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Zero-mean Gaussian entries with the given standard deviation.
    pub fn randn(shape: &[usize], std: f64, rng: &mut impl rand::Rng) -> Self {
        use rand_distr::{Distribution, StandardNormal};
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
            grad: None,
        }
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Adds `src` into the gradient accumulator, allocating it on first use.
    pub fn accumulate_grad(&mut self, src: &[f64]) {
        debug_assert_eq!(src.len(), self.data.len());
        match &mut self.grad {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(src) {
                    *a += b;
                }
            }
            None => self.grad = Some(src.to_vec()),
        }
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// In-place `self += c * other`. Shapes must match exactly.
    pub fn add_scaled(&mut self, other: &Tensor, c: f64) -> TensorResult<()> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op: "add_scaled",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute element, 0 for empty tensors.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

pub(crate) fn product(shape: &[usize]) -> usize {
    shape.iter().product()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        let err = Tensor::from_vec(vec![2, 3], vec![1.0; 5]).unwrap_err();
        assert_eq!(
            err,
            TensorError::DataLength {
                expected: 6,
                got: 5
            }
        );
    }

    #[test]
    fn identity_diagonal() {
        let t = Tensor::identity(3);
        assert_eq!(t.data()[0], 1.0);
        assert_eq!(t.data()[4], 1.0);
        assert_eq!(t.data()[8], 1.0);
        assert_eq!(t.data().iter().sum::<f64>(), 3.0);
    }

    #[test]
    fn grad_accumulates_additively() {
        let mut t = Tensor::zeros(&[2]);
        t.accumulate_grad(&[1.0, 2.0]);
        t.accumulate_grad(&[0.5, 0.5]);
        assert_eq!(t.grad().unwrap(), &[1.5, 2.5]);
        t.zero_grad();
        assert_eq!(t.grad().unwrap(), &[0.0, 0.0]);
    }
}
