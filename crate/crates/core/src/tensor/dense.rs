//! Dense row-major tensors over a [`Real`] scalar.
//!
//! Rank 0 (scalar), 1 (vector) and 2 (matrix) cover everything this crate
//! computes; the shape is a plain `Vec<usize>` so higher ranks would store
//! fine, but the graph primitives only define semantics up to rank 2.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape {shape:?} implies {expected} elements, got {actual}")]
    LengthMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("shape mismatch at node {node}: {detail}")]
    ShapeMismatch { node: usize, detail: String },
    #[error("non-finite value produced at node {node} ({op})")]
    NonFinite { node: usize, op: String },
    #[error("non-finite value in tensor data")]
    NonFiniteData,
    #[error("missing input binding `{0}`")]
    MissingInput(String),
    #[error("input `{name}` bound with shape {bound:?}, declared {declared:?}")]
    InputShape {
        name: String,
        bound: Vec<usize>,
        declared: Vec<usize>,
    },
    #[error("evaluation does not belong to this graph ({eval_nodes} nodes cached, graph has {graph_nodes})")]
    StaleEvaluation {
        eval_nodes: usize,
        graph_nodes: usize,
    },
    #[error("backward seed shape {seed:?} does not match output shape {output:?}")]
    SeedShape {
        seed: Vec<usize>,
        output: Vec<usize>,
    },
    #[error("{0}")]
    Invalid(String),
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Dense tensor: row-major data plus its shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    /// Build from a shape and flat data; rejects length mismatches and
    /// non-finite elements.
    pub fn from_shape_vec(shape: &[usize], data: Vec<T>) -> Result<Self, TensorError> {
        let expected = numel(shape);
        if data.len() != expected {
            return Err(TensorError::LengthMismatch {
                shape: shape.to_vec(),
                expected,
                actual: data.len(),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFiniteData);
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Like [`Tensor::from_shape_vec`] but without the finiteness check;
    /// used internally where finiteness is verified by the caller.
    pub(crate) fn from_parts_unchecked(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); numel(shape)],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    /// Rank-0 scalar.
    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// Rank-1 vector.
    pub fn vector(data: Vec<T>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Rank-2 matrix from row-major data.
    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self, TensorError> {
        Self::from_shape_vec(&[rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// Sole element of a single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() requires exactly one element");
        self.data[0]
    }

    /// Number of rows when interpreted as a matrix ([n] counts as one row).
    pub fn rows(&self) -> usize {
        match self.shape.as_slice() {
            [r, _] => *r,
            _ => 1,
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.as_slice() {
            [_, c] => *c,
            [c] => *c,
            _ => 1,
        }
    }

    pub fn get2(&self, i: usize, j: usize) -> T {
        let cols = self.cols();
        self.data[i * cols + j]
    }

    pub fn row(&self, i: usize) -> &[T] {
        let cols = self.cols();
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        debug_assert_eq!(self.shape, other.shape);
        Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    /// `self += c * other`, shapes must match.
    pub fn add_scaled(&mut self, other: &Self, c: T) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
    }

    pub fn scale_in_place(&mut self, c: T) {
        for a in self.data.iter_mut() {
            *a *= c;
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::from_usize(self.len()).unwrap()
    }

    pub fn l2_norm(&self) -> T {
        self.data
            .iter()
            .map(|&v| v * v)
            .sum::<T>()
            .sqrt()
    }

    /// Matrix product `[m,k] x [k,n] -> [m,n]`; both operands must be rank 2.
    pub fn matmul(&self, rhs: &Self) -> Result<Self, TensorError> {
        let (&[m, k], &[k2, n]) = (
            match self.shape.as_slice() {
                s @ [_, _] => <&[usize; 2]>::try_from(s).unwrap(),
                _ => {
                    return Err(TensorError::Invalid(format!(
                        "matmul lhs must be rank 2, got {:?}",
                        self.shape
                    )))
                }
            },
            match rhs.shape.as_slice() {
                s @ [_, _] => <&[usize; 2]>::try_from(s).unwrap(),
                _ => {
                    return Err(TensorError::Invalid(format!(
                        "matmul rhs must be rank 2, got {:?}",
                        rhs.shape
                    )))
                }
            },
        );
        if k != k2 {
            return Err(TensorError::Invalid(format!(
                "matmul inner dimensions disagree: {:?} x {:?}",
                self.shape, rhs.shape
            )));
        }
        // ikj loop order keeps both the rhs row and the output row contiguous.
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let lhs_row = &self.data[i * k..(i + 1) * k];
            let out_row = &mut out[i * n..(i + 1) * n];
            for (kk, &a) in lhs_row.iter().enumerate() {
                let rhs_row = &rhs.data[kk * n..(kk + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(rhs_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Self {
            shape: vec![m, n],
            data: out,
        })
    }

    /// Transposed matrix (rank 2 only).
    pub fn transpose(&self) -> Self {
        let [m, n] = match self.shape.as_slice() {
            [m, n] => [*m, *n],
            _ => panic!("transpose requires rank 2, got {:?}", self.shape),
        };
        let mut data = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = self.data[i * n + j];
            }
        }
        Self {
            shape: vec![n, m],
            data,
        }
    }
}
