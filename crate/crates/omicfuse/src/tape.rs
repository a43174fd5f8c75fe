//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Forward operations execute immediately and append one node each, so the
//! tape is in topological order by construction. [`Tape::backward`] walks the
//! nodes once in reverse, accumulating vector-Jacobian products into every
//! node that (transitively) depends on a trainable leaf. Gradients of
//! non-participating leaves are exactly zero.

use crate::error::{Error, Result};
use crate::tensor::DiffTensor;
use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(pub(crate) usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul { a: TensorId, b: TensorId },
    Transpose { x: TensorId },
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    MulElem { a: TensorId, b: TensorId },
    Scale { x: TensorId, c: f64 },
    AddConst { x: TensorId },
    AddRow { x: TensorId, row: TensorId },
    MulScalar { x: TensorId, s: TensorId },
    Recip { x: TensorId },
    Abs { x: TensorId },
    Relu { x: TensorId },
    SoftmaxRows { x: TensorId },
    LogSoftmaxRows { x: TensorId },
    LayerNormRows {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        normalized: Vec<f64>,
        rstd: Vec<f64>,
    },
    SumAll { x: TensorId },
    SumAxis0 { x: TensorId },
    SumAxis1 { x: TensorId },
    MeanAxis0 { x: TensorId },
    MaxAll { x: TensorId, argmax: usize },
    ConcatRows { parts: Vec<TensorId> },
    ConcatCols { parts: Vec<TensorId> },
    SliceRows { x: TensorId, start: usize },
    SliceCols { x: TensorId, start: usize },
    GatherRows { x: TensorId, indices: Vec<usize> },
    ReplaceRowsBroadcast { x: TensorId, v: TensorId, rows: Vec<usize> },
    SumAbsDiff { a: TensorId, b: TensorId },
    NllPickMean { x: TensorId, labels: Vec<usize> },
}

struct Node {
    value: DiffTensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by one backward pass.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: TensorId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Gradient w.r.t. `id`, densified to zeros when the node did not
    /// participate in the loss.
    pub fn wrt(&self, id: TensorId, numel: usize) -> Vec<f64> {
        match self.get(id) {
            Some(g) => g.to_vec(),
            None => vec![0.0; numel],
        }
    }
}

fn matmul_into(
    a: &DiffTensor,
    b: &DiffTensor,
    ta: bool,
    tb: bool,
    beta: f64,
    out: &mut [f64],
    out_rows: usize,
    out_cols: usize,
) {
    let (ar, ac) = a.dims2().unwrap();
    let (br, bc) = b.dims2().unwrap();
    let av = ArrayView2::from_shape((ar, ac), a.data()).unwrap();
    let bv = ArrayView2::from_shape((br, bc), b.data()).unwrap();
    let mut cv = ArrayViewMut2::from_shape((out_rows, out_cols), out).unwrap();
    match (ta, tb) {
        (false, false) => general_mat_mul(1.0, &av, &bv, beta, &mut cv),
        (true, false) => general_mat_mul(1.0, &av.t(), &bv, beta, &mut cv),
        (false, true) => general_mat_mul(1.0, &av, &bv.t(), beta, &mut cv),
        (true, true) => general_mat_mul(1.0, &av.t(), &bv.t(), beta, &mut cv),
    }
}

/// dC (shape r x c, as slice) times/against a value tensor, accumulated into
/// a parent gradient buffer.
fn gemm_slices(
    a: &[f64],
    (ar, ac): (usize, usize),
    ta: bool,
    b: &[f64],
    (br, bc): (usize, usize),
    tb: bool,
    out: &mut [f64],
    (or_, oc): (usize, usize),
) {
    let av = ArrayView2::from_shape((ar, ac), a).unwrap();
    let bv = ArrayView2::from_shape((br, bc), b).unwrap();
    let mut cv = ArrayViewMut2::from_shape((or_, oc), out).unwrap();
    match (ta, tb) {
        (false, false) => general_mat_mul(1.0, &av, &bv, 1.0, &mut cv),
        (true, false) => general_mat_mul(1.0, &av.t(), &bv, 1.0, &mut cv),
        (false, true) => general_mat_mul(1.0, &av, &bv.t(), 1.0, &mut cv),
        (true, true) => general_mat_mul(1.0, &av.t(), &bv.t(), 1.0, &mut cv),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: TensorId) -> &DiffTensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: DiffTensor, op: Op, needs_grad: bool) -> TensorId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Trainable leaf: gradients will be computed for it.
    pub fn leaf(&mut self, t: &DiffTensor) -> TensorId {
        self.push(t.clone(), Op::Leaf, true)
    }

    /// Untracked input: participates in the forward pass only.
    pub fn constant(&mut self, t: DiffTensor) -> TensorId {
        self.push(t, Op::Leaf, false)
    }

    pub fn constant_ref(&mut self, t: &DiffTensor) -> TensorId {
        self.constant(t.clone())
    }

    /// Register a parameter, tracked unless `frozen`.
    pub fn param(&mut self, t: &DiffTensor, frozen: bool) -> TensorId {
        if frozen {
            self.constant_ref(t)
        } else {
            self.leaf(t)
        }
    }

    // ---- binary ops ------------------------------------------------------

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ar, ac) = self.value(a).dims2()?;
        let (br, bc) = self.value(b).dims2()?;
        if ac != br {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let mut out = vec![0.0; ar * bc];
        matmul_into(self.value(a), self.value(b), false, false, 0.0, &mut out, ar, bc);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            DiffTensor::from_vec(&[ar, bc], out)?,
            Op::Matmul { a, b },
            needs,
        ))
    }

    /// `x @ w (+ bias)` with the bias broadcast across rows.
    pub fn linear(
        &mut self,
        x: TensorId,
        w: TensorId,
        bias: Option<TensorId>,
    ) -> Result<TensorId> {
        let y = self.matmul(x, w)?;
        match bias {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    fn same_shape(&self, op: &'static str, a: TensorId, b: TensorId) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(DiffTensor::from_vec(&shape, data)?, Op::Add { a, b }, needs))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("sub", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(DiffTensor::from_vec(&shape, data)?, Op::Sub { a, b }, needs))
    }

    pub fn mul_elem(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("mul_elem", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            DiffTensor::from_vec(&shape, data)?,
            Op::MulElem { a, b },
            needs,
        ))
    }

    /// Broadcast row add: `x[N x M] + row[M]`.
    pub fn add_row(&mut self, x: TensorId, row: TensorId) -> Result<TensorId> {
        let (n, m) = self.value(x).dims2()?;
        let (rr, rc) = self.value(row).dims2()?;
        if rr != 1 || rc != m {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                lhs: self.value(x).shape().to_vec(),
                rhs: self.value(row).shape().to_vec(),
            });
        }
        let mut data = self.value(x).data().to_vec();
        let rowdata = self.value(row).data();
        for i in 0..n {
            for j in 0..m {
                data[i * m + j] += rowdata[j];
            }
        }
        let needs = self.needs(x) || self.needs(row);
        Ok(self.push(
            DiffTensor::from_vec(&[n, m], data)?,
            Op::AddRow { x, row },
            needs,
        ))
    }

    /// Multiply every element of `x` by the 1x1 tensor `s`.
    pub fn mul_scalar(&mut self, x: TensorId, s: TensorId) -> Result<TensorId> {
        if self.value(s).numel() != 1 {
            return Err(Error::ShapeMismatch {
                op: "mul_scalar",
                lhs: self.value(x).shape().to_vec(),
                rhs: self.value(s).shape().to_vec(),
            });
        }
        let sv = self.value(s).data()[0];
        let data = self.value(x).data().iter().map(|v| v * sv).collect();
        let shape = self.value(x).shape().to_vec();
        let needs = self.needs(x) || self.needs(s);
        Ok(self.push(
            DiffTensor::from_vec(&shape, data)?,
            Op::MulScalar { x, s },
            needs,
        ))
    }

    // ---- unary ops -------------------------------------------------------

    pub fn scale(&mut self, x: TensorId, c: f64) -> TensorId {
        let data = self.value(x).data().iter().map(|v| v * c).collect();
        let shape = self.value(x).shape().to_vec();
        let needs = self.needs(x);
        self.push(
            DiffTensor::from_vec(&shape, data).unwrap(),
            Op::Scale { x, c },
            needs,
        )
    }

    pub fn add_const(&mut self, x: TensorId, c: f64) -> TensorId {
        let data = self.value(x).data().iter().map(|v| v + c).collect();
        let shape = self.value(x).shape().to_vec();
        let needs = self.needs(x);
        self.push(
            DiffTensor::from_vec(&shape, data).unwrap(),
            Op::AddConst { x },
            needs,
        )
    }

    pub fn transpose(&mut self, x: TensorId) -> Result<TensorId> {
        let (n, m) = self.value(x).dims2()?;
        let src = self.value(x).data();
        let mut data = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                data[j * n + i] = src[i * m + j];
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            DiffTensor::from_vec(&[m, n], data)?,
            Op::Transpose { x },
            needs,
        ))
    }

    /// Elementwise reciprocal; rejects zero inputs.
    pub fn recip(&mut self, x: TensorId) -> Result<TensorId> {
        if self.value(x).data().iter().any(|v| *v == 0.0 || !v.is_finite()) {
            return Err(Error::numeric("recip", "zero or non-finite input"));
        }
        let data = self.value(x).data().iter().map(|v| 1.0 / v).collect();
        let shape = self.value(x).shape().to_vec();
        let needs = self.needs(x);
        Ok(self.push(DiffTensor::from_vec(&shape, data)?, Op::Recip { x }, needs))
    }

    pub fn abs(&mut self, x: TensorId) -> TensorId {
        let data = self.value(x).data().iter().map(|v| v.abs()).collect();
        let shape = self.value(x).shape().to_vec();
        let needs = self.needs(x);
        self.push(
            DiffTensor::from_vec(&shape, data).unwrap(),
            Op::Abs { x },
            needs,
        )
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        let data = self.value(x).data().iter().map(|v| v.max(0.0)).collect();
        let shape = self.value(x).shape().to_vec();
        let needs = self.needs(x);
        self.push(
            DiffTensor::from_vec(&shape, data).unwrap(),
            Op::Relu { x },
            needs,
        )
    }

    /// Row-wise softmax with per-row max subtraction for stability.
    pub fn softmax_rows(&mut self, x: TensorId) -> Result<TensorId> {
        let (n, m) = self.value(x).dims2()?;
        if !self.value(x).is_finite() {
            return Err(Error::numeric("softmax_rows", "non-finite input"));
        }
        let src = self.value(x).data();
        let mut data = vec![0.0; n * m];
        for i in 0..n {
            let row = &src[i * m..(i + 1) * m];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..m {
                let e = (row[j] - max).exp();
                data[i * m + j] = e;
                sum += e;
            }
            for j in 0..m {
                data[i * m + j] /= sum;
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            DiffTensor::from_vec(&[n, m], data)?,
            Op::SoftmaxRows { x },
            needs,
        ))
    }

    pub fn log_softmax_rows(&mut self, x: TensorId) -> Result<TensorId> {
        let (n, m) = self.value(x).dims2()?;
        if !self.value(x).is_finite() {
            return Err(Error::numeric("log_softmax_rows", "non-finite input"));
        }
        let src = self.value(x).data();
        let mut data = vec![0.0; n * m];
        for i in 0..n {
            let row = &src[i * m..(i + 1) * m];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            for j in 0..m {
                data[i * m + j] = row[j] - lse;
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            DiffTensor::from_vec(&[n, m], data)?,
            Op::LogSoftmaxRows { x },
            needs,
        ))
    }

    /// Row-wise layer normalization with learnable `gamma`, `beta` (length M).
    pub fn layer_norm_rows(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> Result<TensorId> {
        let (n, m) = self.value(x).dims2()?;
        let (gr, gc) = self.value(gamma).dims2()?;
        let (br, bc) = self.value(beta).dims2()?;
        if gr != 1 || gc != m || br != 1 || bc != m {
            return Err(Error::ShapeMismatch {
                op: "layer_norm_rows",
                lhs: self.value(x).shape().to_vec(),
                rhs: self.value(gamma).shape().to_vec(),
            });
        }
        let src = self.value(x).data();
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        let mut data = vec![0.0; n * m];
        let mut normalized = vec![0.0; n * m];
        let mut rstd = vec![0.0; n];
        for i in 0..n {
            let row = &src[i * m..(i + 1) * m];
            let mean = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..m {
                let xn = (row[j] - mean) * r;
                normalized[i * m + j] = xn;
                data[i * m + j] = g[j] * xn + b[j];
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            DiffTensor::from_vec(&[n, m], data)?,
            Op::LayerNormRows {
                x,
                gamma,
                beta,
                normalized,
                rstd,
            },
            needs,
        ))
    }

    // ---- reductions ------------------------------------------------------

    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        let s: f64 = self.value(x).data().iter().sum();
        let needs = self.needs(x);
        self.push(DiffTensor::scalar(s), Op::SumAll { x }, needs)
    }

    /// Column sums: `[N x M] -> [1 x M]`.
    pub fn sum_axis0(&mut self, x: TensorId) -> Result<TensorId> {
        let (n, m) = self.value(x).dims2()?;
        let src = self.value(x).data();
        let mut data = vec![0.0; m];
        for i in 0..n {
            for j in 0..m {
                data[j] += src[i * m + j];
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            DiffTensor::from_vec(&[1, m], data)?,
            Op::SumAxis0 { x },
            needs,
        ))
    }

    /// Row sums: `[N x M] -> [N x 1]`.
    pub fn sum_axis1(&mut self, x: TensorId) -> Result<TensorId> {
        let (n, m) = self.value(x).dims2()?;
        let src = self.value(x).data();
        let data = (0..n)
            .map(|i| src[i * m..(i + 1) * m].iter().sum())
            .collect();
        let needs = self.needs(x);
        Ok(self.push(
            DiffTensor::from_vec(&[n, 1], data)?,
            Op::SumAxis1 { x },
            needs,
        ))
    }

    /// Column means: `[N x M] -> [1 x M]`.
    pub fn mean_axis0(&mut self, x: TensorId) -> Result<TensorId> {
        let (n, m) = self.value(x).dims2()?;
        let src = self.value(x).data();
        let mut data = vec![0.0; m];
        for i in 0..n {
            for j in 0..m {
                data[j] += src[i * m + j];
            }
        }
        data.iter_mut().for_each(|v| *v /= n as f64);
        let needs = self.needs(x);
        Ok(self.push(
            DiffTensor::from_vec(&[1, m], data)?,
            Op::MeanAxis0 { x },
            needs,
        ))
    }

    /// Maximum element as a scalar; ties resolve to the first occurrence.
    pub fn max_all(&mut self, x: TensorId) -> TensorId {
        let src = self.value(x).data();
        let mut argmax = 0;
        let mut best = src[0];
        for (i, &v) in src.iter().enumerate().skip(1) {
            if v > best {
                best = v;
                argmax = i;
            }
        }
        let needs = self.needs(x);
        self.push(DiffTensor::scalar(best), Op::MaxAll { x, argmax }, needs)
    }

    /// Sum of squares: `sum(x^2)` as a scalar.
    pub fn sq_sum(&mut self, x: TensorId) -> Result<TensorId> {
        let sq = self.mul_elem(x, x)?;
        Ok(self.sum_all(sq))
    }

    /// L1 norm: `sum(|x|)` as a scalar.
    pub fn l1_sum(&mut self, x: TensorId) -> TensorId {
        let a = self.abs(x);
        self.sum_all(a)
    }

    /// `sum(|a - b|)` as a scalar.
    pub fn sum_abs_diff(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("sum_abs_diff", a, b)?;
        let s: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| (x - y).abs())
            .sum();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(DiffTensor::scalar(s), Op::SumAbsDiff { a, b }, needs))
    }

    /// Negative log likelihood from log-probabilities: `-mean_i x[i, labels[i]]`.
    pub fn nll_pick_mean(&mut self, x: TensorId, labels: &[usize]) -> Result<TensorId> {
        let (n, m) = self.value(x).dims2()?;
        if labels.len() != n {
            return Err(Error::config(format!(
                "nll_pick_mean: {} labels for {} rows",
                labels.len(),
                n
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= m) {
            return Err(Error::data(
                "<labels>",
                format!("label {bad} outside [0, {m})"),
            ));
        }
        let src = self.value(x).data();
        let s: f64 = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| src[i * m + l])
            .sum();
        let needs = self.needs(x);
        Ok(self.push(
            DiffTensor::scalar(-s / n as f64),
            Op::NllPickMean {
                x,
                labels: labels.to_vec(),
            },
            needs,
        ))
    }

    // ---- structural ops --------------------------------------------------

    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        assert!(!parts.is_empty(), "concat_rows on empty list");
        let (_, m) = self.value(parts[0]).dims2()?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (pr, pc) = self.value(p).dims2()?;
            if pc != m {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: self.value(p).shape().to_vec(),
                });
            }
            rows += pr;
            data.extend_from_slice(self.value(p).data());
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            DiffTensor::from_vec(&[rows, m], data)?,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            needs,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        assert!(!parts.is_empty(), "concat_cols on empty list");
        let (n, _) = self.value(parts[0]).dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0;
        for &p in parts {
            let (pr, pc) = self.value(p).dims2()?;
            if pr != n {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: self.value(p).shape().to_vec(),
                });
            }
            widths.push(pc);
            total += pc;
        }
        let mut data = vec![0.0; n * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for i in 0..n {
                data[i * total + offset..i * total + offset + w]
                    .copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            DiffTensor::from_vec(&[n, total], data)?,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            needs,
        ))
    }

    pub fn slice_rows(&mut self, x: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let (n, m) = self.value(x).dims2()?;
        if start + len > n {
            return Err(Error::config(format!(
                "slice_rows [{start}, {}) out of bounds for {n} rows",
                start + len
            )));
        }
        let data = self.value(x).data()[start * m..(start + len) * m].to_vec();
        let needs = self.needs(x);
        Ok(self.push(
            DiffTensor::from_vec(&[len, m], data)?,
            Op::SliceRows { x, start },
            needs,
        ))
    }

    pub fn slice_cols(&mut self, x: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let (n, m) = self.value(x).dims2()?;
        if start + len > m {
            return Err(Error::config(format!(
                "slice_cols [{start}, {}) out of bounds for {m} cols",
                start + len
            )));
        }
        let src = self.value(x).data();
        let mut data = vec![0.0; n * len];
        for i in 0..n {
            data[i * len..(i + 1) * len].copy_from_slice(&src[i * m + start..i * m + start + len]);
        }
        let needs = self.needs(x);
        Ok(self.push(
            DiffTensor::from_vec(&[n, len], data)?,
            Op::SliceCols { x, start },
            needs,
        ))
    }

    /// Rows of `x` at `indices` (duplicates allowed), stacked in order.
    pub fn gather_rows(&mut self, x: TensorId, indices: &[usize]) -> Result<TensorId> {
        let (n, m) = self.value(x).dims2()?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::config(format!(
                "gather_rows index {bad} out of bounds for {n} rows"
            )));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(indices.len() * m);
        for &i in indices {
            data.extend_from_slice(&src[i * m..(i + 1) * m]);
        }
        let needs = self.needs(x);
        Ok(self.push(
            DiffTensor::from_vec(&[indices.len(), m], data)?,
            Op::GatherRows {
                x,
                indices: indices.to_vec(),
            },
            needs,
        ))
    }

    /// Copy of `x` with each row in `rows` replaced by the broadcast row `v`.
    pub fn replace_rows_broadcast(
        &mut self,
        x: TensorId,
        v: TensorId,
        rows: &[usize],
    ) -> Result<TensorId> {
        let (n, m) = self.value(x).dims2()?;
        let (vr, vc) = self.value(v).dims2()?;
        if vr != 1 || vc != m {
            return Err(Error::ShapeMismatch {
                op: "replace_rows_broadcast",
                lhs: self.value(x).shape().to_vec(),
                rhs: self.value(v).shape().to_vec(),
            });
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::config(format!(
                "replace_rows_broadcast row {bad} out of bounds for {n} rows"
            )));
        }
        let mut data = self.value(x).data().to_vec();
        let vdata = self.value(v).data().to_vec();
        for &r in rows {
            data[r * m..(r + 1) * m].copy_from_slice(&vdata);
        }
        let needs = self.needs(x) || self.needs(v);
        Ok(self.push(
            DiffTensor::from_vec(&[n, m], data)?,
            Op::ReplaceRowsBroadcast {
                x,
                v,
                rows: rows.to_vec(),
            },
            needs,
        ))
    }

    // ---- backward --------------------------------------------------------

    /// Reverse pass from a scalar node. Visits every node at most once, in
    /// reverse insertion (= reverse topological) order.
    pub fn backward(&mut self, loss: TensorId) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::config(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].needs_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(
        &self,
        grads: &mut [Option<Vec<f64>>],
        id: TensorId,
        f: impl FnOnce(&mut [f64]),
    ) {
        if !self.needs(id) {
            return;
        }
        let slot =
            grads[id.0].get_or_insert_with(|| vec![0.0; self.nodes[id.0].value.numel()]);
        f(slot);
    }

    #[allow(clippy::too_many_lines)]
    fn propagate(
        &self,
        idx: usize,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) -> Result<()> {
        let out_dims = self.nodes[idx].value.dims2()?;
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (ar, ac) = self.value(*a).dims2()?;
                let (br, bc) = self.value(*b).dims2()?;
                let bdata = self.value(*b).data();
                let adata = self.value(*a).data();
                // dA += dC . B^T
                self.accumulate(grads, *a, |da| {
                    gemm_slices(g, out_dims, false, bdata, (br, bc), true, da, (ar, ac));
                });
                // dB += A^T . dC
                self.accumulate(grads, *b, |db| {
                    gemm_slices(adata, (ar, ac), true, g, out_dims, false, db, (br, bc));
                });
            }
            Op::Transpose { x } => {
                let (n, m) = self.value(*x).dims2()?;
                self.accumulate(grads, *x, |dx| {
                    for i in 0..m {
                        for j in 0..n {
                            dx[j * m + i] += g[i * n + j];
                        }
                    }
                });
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, |da| {
                    da.iter_mut().zip(g).for_each(|(d, gi)| *d += gi)
                });
                self.accumulate(grads, *b, |db| {
                    db.iter_mut().zip(g).for_each(|(d, gi)| *d += gi)
                });
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, |da| {
                    da.iter_mut().zip(g).for_each(|(d, gi)| *d += gi)
                });
                self.accumulate(grads, *b, |db| {
                    db.iter_mut().zip(g).for_each(|(d, gi)| *d -= gi)
                });
            }
            Op::MulElem { a, b } => {
                let bdata = self.value(*b).data();
                let adata = self.value(*a).data();
                self.accumulate(grads, *a, |da| {
                    for k in 0..g.len() {
                        da[k] += g[k] * bdata[k];
                    }
                });
                self.accumulate(grads, *b, |db| {
                    for k in 0..g.len() {
                        db[k] += g[k] * adata[k];
                    }
                });
            }
            Op::Scale { x, c } => {
                let c = *c;
                self.accumulate(grads, *x, |dx| {
                    for k in 0..g.len() {
                        dx[k] += g[k] * c;
                    }
                });
            }
            Op::AddConst { x } => {
                self.accumulate(grads, *x, |dx| {
                    dx.iter_mut().zip(g).for_each(|(d, gi)| *d += gi)
                });
            }
            Op::AddRow { x, row } => {
                let (n, m) = self.value(*x).dims2()?;
                self.accumulate(grads, *x, |dx| {
                    dx.iter_mut().zip(g).for_each(|(d, gi)| *d += gi)
                });
                self.accumulate(grads, *row, |dr| {
                    for i in 0..n {
                        for j in 0..m {
                            dr[j] += g[i * m + j];
                        }
                    }
                });
            }
            Op::MulScalar { x, s } => {
                let sv = self.value(*s).data()[0];
                let xdata = self.value(*x).data();
                self.accumulate(grads, *x, |dx| {
                    for k in 0..g.len() {
                        dx[k] += g[k] * sv;
                    }
                });
                self.accumulate(grads, *s, |ds| {
                    ds[0] += g.iter().zip(xdata).map(|(gi, xi)| gi * xi).sum::<f64>();
                });
            }
            Op::Recip { x } => {
                let xdata = self.value(*x).data();
                self.accumulate(grads, *x, |dx| {
                    for k in 0..g.len() {
                        dx[k] -= g[k] / (xdata[k] * xdata[k]);
                    }
                });
            }
            Op::Abs { x } => {
                let xdata = self.value(*x).data();
                self.accumulate(grads, *x, |dx| {
                    for k in 0..g.len() {
                        dx[k] += g[k] * xdata[k].signum() * (xdata[k] != 0.0) as u8 as f64;
                    }
                });
            }
            Op::Relu { x } => {
                let xdata = self.value(*x).data();
                self.accumulate(grads, *x, |dx| {
                    for k in 0..g.len() {
                        if xdata[k] > 0.0 {
                            dx[k] += g[k];
                        }
                    }
                });
            }
            Op::SoftmaxRows { x } => {
                let (n, m) = out_dims;
                let y = self.nodes[idx].value.data();
                self.accumulate(grads, *x, |dx| {
                    for i in 0..n {
                        let yrow = &y[i * m..(i + 1) * m];
                        let grow = &g[i * m..(i + 1) * m];
                        let dot: f64 = yrow.iter().zip(grow).map(|(yi, gi)| yi * gi).sum();
                        for j in 0..m {
                            dx[i * m + j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmaxRows { x } => {
                let (n, m) = out_dims;
                let y = self.nodes[idx].value.data();
                self.accumulate(grads, *x, |dx| {
                    for i in 0..n {
                        let grow = &g[i * m..(i + 1) * m];
                        let gsum: f64 = grow.iter().sum();
                        for j in 0..m {
                            dx[i * m + j] += grow[j] - y[i * m + j].exp() * gsum;
                        }
                    }
                });
            }
            Op::LayerNormRows {
                x,
                gamma,
                beta,
                normalized,
                rstd,
            } => {
                let (n, m) = out_dims;
                let gdata = self.value(*gamma).data();
                self.accumulate(grads, *gamma, |dg| {
                    for i in 0..n {
                        for j in 0..m {
                            dg[j] += g[i * m + j] * normalized[i * m + j];
                        }
                    }
                });
                self.accumulate(grads, *beta, |db| {
                    for i in 0..n {
                        for j in 0..m {
                            db[j] += g[i * m + j];
                        }
                    }
                });
                self.accumulate(grads, *x, |dx| {
                    for i in 0..n {
                        let mut mean_dxhat = 0.0;
                        let mut mean_dxhat_xhat = 0.0;
                        for j in 0..m {
                            let dxhat = g[i * m + j] * gdata[j];
                            mean_dxhat += dxhat;
                            mean_dxhat_xhat += dxhat * normalized[i * m + j];
                        }
                        mean_dxhat /= m as f64;
                        mean_dxhat_xhat /= m as f64;
                        for j in 0..m {
                            let dxhat = g[i * m + j] * gdata[j];
                            dx[i * m + j] += rstd[i]
                                * (dxhat - mean_dxhat - normalized[i * m + j] * mean_dxhat_xhat);
                        }
                    }
                });
            }
            Op::SumAll { x } => {
                let gi = g[0];
                self.accumulate(grads, *x, |dx| dx.iter_mut().for_each(|d| *d += gi));
            }
            Op::SumAxis0 { x } => {
                let (n, m) = self.value(*x).dims2()?;
                self.accumulate(grads, *x, |dx| {
                    for i in 0..n {
                        for j in 0..m {
                            dx[i * m + j] += g[j];
                        }
                    }
                });
            }
            Op::SumAxis1 { x } => {
                let (n, m) = self.value(*x).dims2()?;
                self.accumulate(grads, *x, |dx| {
                    for i in 0..n {
                        for j in 0..m {
                            dx[i * m + j] += g[i];
                        }
                    }
                });
            }
            Op::MeanAxis0 { x } => {
                let (n, m) = self.value(*x).dims2()?;
                let inv = 1.0 / n as f64;
                self.accumulate(grads, *x, |dx| {
                    for i in 0..n {
                        for j in 0..m {
                            dx[i * m + j] += g[j] * inv;
                        }
                    }
                });
            }
            Op::MaxAll { x, argmax } => {
                let k = *argmax;
                let gi = g[0];
                self.accumulate(grads, *x, |dx| dx[k] += gi);
            }
            Op::ConcatRows { parts } => {
                let (_, m) = out_dims;
                let mut offset = 0;
                for &p in parts {
                    let (pr, _) = self.value(p).dims2()?;
                    self.accumulate(grads, p, |dp| {
                        dp.iter_mut()
                            .zip(&g[offset * m..(offset + pr) * m])
                            .for_each(|(d, gi)| *d += gi);
                    });
                    offset += pr;
                }
            }
            Op::ConcatCols { parts } => {
                let (n, total) = out_dims;
                let mut offset = 0;
                for &p in parts {
                    let (_, pc) = self.value(p).dims2()?;
                    self.accumulate(grads, p, |dp| {
                        for i in 0..n {
                            for j in 0..pc {
                                dp[i * pc + j] += g[i * total + offset + j];
                            }
                        }
                    });
                    offset += pc;
                }
            }
            Op::SliceRows { x, start } => {
                let (rows, m) = out_dims;
                let s = *start;
                self.accumulate(grads, *x, |dx| {
                    dx[s * m..(s + rows) * m]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(d, gi)| *d += gi);
                });
            }
            Op::SliceCols { x, start } => {
                let (n, len) = out_dims;
                let (_, m) = self.value(*x).dims2()?;
                let s = *start;
                self.accumulate(grads, *x, |dx| {
                    for i in 0..n {
                        for j in 0..len {
                            dx[i * m + s + j] += g[i * len + j];
                        }
                    }
                });
            }
            Op::GatherRows { x, indices } => {
                let (_, m) = out_dims;
                self.accumulate(grads, *x, |dx| {
                    for (r, &i) in indices.iter().enumerate() {
                        for j in 0..m {
                            dx[i * m + j] += g[r * m + j];
                        }
                    }
                });
            }
            Op::ReplaceRowsBroadcast { x, v, rows } => {
                let (_, m) = out_dims;
                self.accumulate(grads, *x, |dx| {
                    let mut replaced = vec![false; dx.len() / m];
                    for &r in rows {
                        replaced[r] = true;
                    }
                    for (i, rep) in replaced.iter().enumerate() {
                        if !rep {
                            for j in 0..m {
                                dx[i * m + j] += g[i * m + j];
                            }
                        }
                    }
                });
                self.accumulate(grads, *v, |dv| {
                    for &r in rows {
                        for j in 0..m {
                            dv[j] += g[r * m + j];
                        }
                    }
                });
            }
            Op::SumAbsDiff { a, b } => {
                let adata = self.value(*a).data();
                let bdata = self.value(*b).data();
                let gi = g[0];
                self.accumulate(grads, *a, |da| {
                    for k in 0..da.len() {
                        let d = adata[k] - bdata[k];
                        if d != 0.0 {
                            da[k] += gi * d.signum();
                        }
                    }
                });
                self.accumulate(grads, *b, |db| {
                    for k in 0..db.len() {
                        let d = adata[k] - bdata[k];
                        if d != 0.0 {
                            db[k] -= gi * d.signum();
                        }
                    }
                });
            }
            Op::NllPickMean { x, labels } => {
                let (n, m) = self.value(*x).dims2()?;
                let gi = g[0];
                self.accumulate(grads, *x, |dx| {
                    for (i, &l) in labels.iter().enumerate() {
                        dx[i * m + l] -= gi / n as f64;
                    }
                });
                let _ = (n, m);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> DiffTensor {
        DiffTensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn linear_identity_case() {
        let mut tape = Tape::new();
        let x = tape.constant(DiffTensor::eye(2));
        let w = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.linear(x, w, None).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn linear_zero_weights() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 3], &[5.0, -1.0, 2.0, 0.5, 3.0, 9.0]));
        let w = tape.constant(DiffTensor::zeros(&[3, 2]));
        let y = tape.linear(x, w, None).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let x = tape.constant(DiffTensor::zeros(&[2, 3]));
        let w = tape.constant(DiffTensor::zeros(&[4, 2]));
        let err = tape.linear(x, w, None).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 3], &[0.0, 0.0, 0.0]));
        let y = tape.softmax_rows(x).unwrap();
        for v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let big = tape.constant(t(&[1, 2], &[1000.0, 0.0]));
        let z = tape.softmax_rows(big).unwrap();
        let zd = tape.value(z).data();
        assert!((zd[0] - 1.0).abs() < 1e-12);
        assert!(zd[1].abs() < 1e-12);
    }

    #[test]
    fn softmax_rejects_nan() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2], &[f64::NAN, 0.0]));
        assert!(matches!(
            tape.softmax_rows(x),
            Err(Error::Numeric { .. })
        ));
    }

    #[test]
    fn diamond_graph_accumulates_through_both_paths() {
        // f = sum(x * x) + sum(x)  =>  df/dx = 2x + 1
        let mut tape = Tape::new();
        let xv = t(&[1, 3], &[1.0, 2.0, -3.0]);
        let x = tape.leaf(&xv);
        let sq = tape.mul_elem(x, x).unwrap();
        let s1 = tape.sum_all(sq);
        let s2 = tape.sum_all(x);
        let f = tape.add(s1, s2).unwrap();
        let grads = tape.backward(f).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[3.0, 5.0, -5.0]);
    }

    #[test]
    fn non_participating_leaf_has_zero_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1, 2], &[1.0, 2.0]));
        let unused = tape.leaf(&t(&[1, 2], &[7.0, 8.0]));
        let f = tape.sq_sum(x).unwrap();
        let grads = tape.backward(f).unwrap();
        assert!(grads.get(unused).is_none());
        assert_eq!(grads.wrt(unused, 2), vec![0.0, 0.0]);
    }

    #[test]
    fn slice_concat_roundtrip() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let a = tape.slice_rows(x, 0, 1).unwrap();
        let b = tape.slice_rows(x, 1, 2).unwrap();
        let y = tape.concat_rows(&[a, b]).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());

        let c = tape.slice_cols(x, 1, 1).unwrap();
        assert_eq!(tape.value(c).data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn replace_rows_only_touches_masked_rows() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let v = tape.constant(t(&[1, 2], &[9.0, 9.0]));
        let y = tape.replace_rows_broadcast(x, v, &[1]).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 9.0, 9.0, 5.0, 6.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1, 2], &[1.0, 2.0]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn nll_matches_hand_computation() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 2], &[-0.1, -2.0, -3.0, -0.2]));
        let f = tape.nll_pick_mean(x, &[0, 1]).unwrap();
        assert!((tape.value(f).data()[0] - 0.15).abs() < 1e-15);
    }
}
