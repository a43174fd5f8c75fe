//! Dense 64-bit float tensors participating in reverse-mode differentiation.
//!
//! A [`DiffTensor`] owns its values (row-major) and, for trainable
//! parameters, a gradient buffer of identical shape. Most operations in this
//! crate work on rank-1 or rank-2 tensors; a rank-1 tensor of length `n` is
//! treated as a `1 x n` row wherever a matrix is expected.

use crate::error::{Error, Result};
use rand::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct DiffTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl DiffTensor {
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&e| e == 0) {
            return Err(Error::config(format!(
                "tensor shape must have positive extents, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::config(format!(
                "tensor data length {} does not match shape {:?} (numel {})",
                data.len(),
                shape,
                numel
            )));
        }
        Ok(DiffTensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        DiffTensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel: usize = shape.iter().product();
        DiffTensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
            requires_grad: false,
            grad: None,
        }
    }

    /// 1 x 1 tensor holding one value.
    pub fn scalar(value: f64) -> Self {
        DiffTensor::from_vec(&[1, 1], vec![value]).unwrap()
    }

    /// 1 x n row vector.
    pub fn row(values: &[f64]) -> Self {
        DiffTensor::from_vec(&[1, values.len()], values.to_vec()).unwrap()
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        DiffTensor::from_vec(&[rows, cols], data)
    }

    /// n x n identity matrix.
    pub fn eye(n: usize) -> Self {
        let mut t = DiffTensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Uniform values in `[lo, hi)`.
    pub fn rand_uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.random_range(lo..hi)).collect();
        DiffTensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        }
    }

    /// Weight initialization: uniform in `(-1/sqrt(fan_in), +1/sqrt(fan_in))`.
    pub fn init_linear(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Self::rand_uniform(shape, -bound, bound, rng)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    /// Interpret as a matrix: rank-2 as-is, rank-1 as a single row.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.len() {
            1 => Ok((1, self.shape[0])),
            2 => Ok((self.shape[0], self.shape[1])),
            _ => Err(Error::config(format!(
                "expected rank <= 2 tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn at2(&self, row: usize, col: usize) -> f64 {
        let (_, cols) = self.dims2().expect("at2 on rank > 2 tensor");
        self.data[row * cols + col]
    }

    /// One row of a matrix as a slice.
    pub fn row_slice(&self, row: usize) -> &[f64] {
        let (_, cols) = self.dims2().expect("row_slice on rank > 2 tensor");
        &self.data[row * cols..(row + 1) * cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
        if flag && self.grad.is_none() {
            self.grad = Some(vec![0.0; self.data.len()]);
        }
    }

    pub fn with_requires_grad(mut self) -> Self {
        self.set_requires_grad(true);
        self
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn accumulate_grad(&mut self, delta: &[f64]) {
        assert_eq!(delta.len(), self.data.len(), "gradient length mismatch");
        let g = self
            .grad
            .get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += di;
        }
    }

    /// Scale the accumulated gradient in place (gradient averaging).
    pub fn scale_grad(&mut self, factor: f64) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|v| *v *= factor);
        }
    }
}

/// Max absolute difference between two equally-shaped tensors.
pub fn max_abs_diff(a: &DiffTensor, b: &DiffTensor) -> f64 {
    assert_eq!(a.shape(), b.shape(), "max_abs_diff shape mismatch");
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
