//! Dense row-major tensors.
//!
//! The carrier type for features, class prototypes, parameters and
//! gradients. Data is a flat array in row-major order; every public
//! constructor and operation checks that entries stay finite.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S: Scalar> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    /// Builds a tensor, validating the shape/data contract.
    ///
    /// Dimension sizes must be positive (an empty shape denotes a scalar)
    /// and the data length must equal the shape product. All entries must
    /// be finite.
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<S>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Dimension {
                op: "tensor::new",
                lhs: shape,
                rhs: vec![],
            });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension {
                op: "tensor::new",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        let t = Tensor { shape, data };
        t.check_finite("tensor::new")?;
        Ok(t)
    }

    pub fn scalar(v: S) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![S::zero(); numel],
        }
    }

    pub fn filled(shape: impl Into<Vec<usize>>, v: S) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![v; numel],
        }
    }

    /// Row vector `[1, n]` from a slice.
    pub fn row(values: &[S]) -> Result<Self> {
        Tensor::new(vec![1, values.len()], values.to_vec())
    }

    /// 2-D tensor from nested rows. Rows must have equal length.
    pub fn from_rows(rows: &[Vec<S>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map(|row| row.len()).unwrap_or(0);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::contract("from_rows: ragged rows"));
        }
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            data.extend_from_slice(row);
        }
        Tensor::new(vec![r, c], data)
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

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// True when the tensor holds exactly one element.
    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn scalar_value(&self) -> Result<S> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(Error::contract(format!(
                "expected scalar tensor, got shape {:?}",
                self.shape
            )))
        }
    }

    pub fn rows(&self) -> usize {
        *self.shape.first().unwrap_or(&1)
    }

    pub fn cols(&self) -> usize {
        *self.shape.get(1).unwrap_or(&1)
    }

    pub fn get2(&self, r: usize, c: usize) -> S {
        self.data[r * self.cols() + c]
    }

    pub fn set2(&mut self, r: usize, c: usize, v: S) {
        let cols = self.cols();
        self.data[r * cols + c] = v;
    }

    pub(crate) fn check_finite(&self, op: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(op))
        }
    }

    fn same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape == other.shape {
            Ok(())
        } else {
            Err(Error::Dimension {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            })
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.same_shape(other, "add")?;
        self.zip(other, |a, b| a + b, "add")
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.same_shape(other, "sub")?;
        self.zip(other, |a, b| a - b, "sub")
    }

    pub fn mul_elem(&self, other: &Self) -> Result<Self> {
        self.same_shape(other, "mul_elem")?;
        self.zip(other, |a, b| a * b, "mul_elem")
    }

    pub fn scale(&self, c: S) -> Result<Self> {
        let data = self.data.iter().map(|&v| v * c).collect();
        let t = Tensor {
            shape: self.shape.clone(),
            data,
        };
        t.check_finite("scale")?;
        Ok(t)
    }

    fn zip(&self, other: &Self, f: impl Fn(S, S) -> S, op: &'static str) -> Result<Self> {
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        let t = Tensor {
            shape: self.shape.clone(),
            data,
        };
        t.check_finite(op)?;
        Ok(t)
    }

    pub fn sum(&self) -> S {
        self.data.iter().fold(S::zero(), |acc, &v| acc + v)
    }

    pub fn dot(&self, other: &Self) -> Result<S> {
        self.same_shape(other, "dot")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(S::zero(), |acc, (&a, &b)| acc + a * b))
    }

    /// Standard matrix product of 2-D tensors, written in ikj order so the
    /// inner loop streams both operands.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.rank() != 2 || other.rank() != 2 || self.cols() != other.rows() {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let (m, k, n) = (self.rows(), self.cols(), other.cols());
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * n..(i + 1) * n];
            for (p, &a) in a_row.iter().enumerate() {
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        let t = Tensor {
            shape: vec![m, n],
            data: out,
        };
        t.check_finite("matmul")?;
        Ok(t)
    }

    pub fn transpose(&self) -> Result<Self> {
        if self.rank() != 2 {
            return Err(Error::Dimension {
                op: "transpose",
                lhs: self.shape.clone(),
                rhs: vec![],
            });
        }
        let (m, n) = (self.rows(), self.cols());
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor {
            shape: vec![n, m],
            data: out,
        })
    }

    /// Largest absolute difference between two tensors of equal shape.
    pub fn max_abs_diff(&self, other: &Self) -> Result<S> {
        self.same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(S::zero(), S::max))
    }
}

/// Numerically stable softmax of a slice; max-subtraction keeps the
/// exponentials bounded under large logits.
pub fn softmax_slice<S: Scalar>(x: &[S]) -> Vec<S> {
    let max = x.iter().copied().fold(S::neg_infinity(), S::max);
    let exps: Vec<S> = x.iter().map(|&v| (v - max).exp()).collect();
    let total = exps.iter().fold(S::zero(), |acc, &v| acc + v);
    exps.into_iter().map(|v| v / total).collect()
}
