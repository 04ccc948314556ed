//! Dense row-major tensors and the reverse-mode tape that differentiates
//! through them.

mod gradcheck;
pub(crate) mod kernels;
mod tape;

pub use gradcheck::{grad_check, GradCheck};
pub use kernels::{NormCenter, NormScale};
pub use tape::{BinaryOp, ReduceKind, Rhs, Tape, UnaryOp, Var};

use crate::error::{Error, Result};

/// Dense n-dimensional array of `f64` values with an optional gradient slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::InvalidShape {
                op: "tensor",
                reason: format!(
                    "shape {shape:?} holds {expected} values, got {}",
                    data.len()
                ),
            });
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let mut t = Tensor::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
            grad: None,
            requires_grad: false,
        }
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub(crate) fn set_grad(&mut self, grad: Option<Vec<f64>>) {
        debug_assert!(grad.as_ref().is_none_or(|g| g.len() == self.data.len()));
        self.grad = grad;
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape,
                rhs: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copies rows `[start, end)` along the leading axis.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Tensor> {
        let rows = *self.shape.first().ok_or(Error::InvalidShape {
            op: "slice_rows",
            reason: "rank-0 tensor".into(),
        })?;
        if start > end || end > rows {
            return Err(Error::InvalidShape {
                op: "slice_rows",
                reason: format!("range {start}..{end} out of bounds for {rows} rows"),
            });
        }
        let stride = self.data.len() / rows.max(1);
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Tensor::new(shape, self.data[start * stride..end * stride].to_vec())
    }

    /// Gathers the given rows along the leading axis.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Tensor> {
        let n = *self.shape.first().ok_or(Error::InvalidShape {
            op: "select_rows",
            reason: "rank-0 tensor".into(),
        })?;
        let stride = if n == 0 { 0 } else { self.data.len() / n };
        let mut data = Vec::with_capacity(rows.len() * stride);
        for &r in rows {
            if r >= n {
                return Err(Error::InvalidShape {
                    op: "select_rows",
                    reason: format!("row {r} out of bounds for {n} rows"),
                });
            }
            data.extend_from_slice(&self.data[r * stride..(r + 1) * stride]);
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        Tensor::new(shape, data)
    }

    /// Concatenates tensors along the leading axis.
    pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or(Error::InvalidShape {
            op: "concat_rows",
            reason: "nothing to concatenate".into(),
        })?;
        let tail = &first.shape[1..];
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.shape.len() != first.shape.len() || &p.shape[1..] != tail {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: first.shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
            rows += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = rows;
        Tensor::new(shape, data)
    }

    /// Index of the largest value in each row of a `[N, K]` tensor; ties go
    /// to the lowest index.
    pub fn argmax_rows(&self) -> Result<Vec<usize>> {
        if self.rank() != 2 || self.shape[1] == 0 {
            return Err(Error::InvalidShape {
                op: "argmax_rows",
                reason: format!("expected non-empty [N, K], got {:?}", self.shape),
            });
        }
        let k = self.shape[1];
        Ok(self
            .data
            .chunks_exact(k)
            .map(|row| {
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect())
    }
}
