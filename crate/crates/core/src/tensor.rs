//! Dense row-major `f64` tensors.
//!
//! A [`Tensor`] is a plain value: a shape and a flat data buffer whose length
//! is the product of the shape. Differentiable computation lives in
//! [`crate::autograd`]; this module only holds storage and a few eager
//! helpers used by tests and the optimizer.

use crate::error::{Error, Result};
use crate::gemm;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// Builds a tensor by evaluating `f` at each flat (row-major) index.
    pub fn from_fn(shape: impl Into<Vec<usize>>, f: impl FnMut(usize) -> f64) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        Self {
            shape,
            data: (0..numel).map(f).collect(),
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

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape,
            });
        }
        Ok(Self {
            shape,
            data: self.data.clone(),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Sum of squares, accumulated serially in index order.
    pub fn sum_squares(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, x| acc + x * x)
    }

    /// Eager 2-D matrix product without gradient tracking.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = matrix_dims("matmul", self, other)?;
        let n = other.shape[1];
        if other.shape[0] != k {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm::gemm(m, k, n, &self.data, &other.data, false, &mut out, false);
        Tensor::new([m, n], out)
    }

    pub fn transpose2d(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::contract(format!(
                "transpose2d on rank-{} tensor",
                self.rank()
            )));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new([c, r], out)
    }
}

fn matrix_dims(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(usize, usize)> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(Error::Shape {
            op,
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    Ok((a.shape[0], a.shape[1]))
}
