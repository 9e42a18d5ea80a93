//! Dense row-major f32 tensors and the handful of kernels the two model
//! halves need. Production arithmetic is 32-bit; the 64-bit counterparts
//! used by tests live in the gear-refmath crate.
//!
//! With the `parallel` feature (default) the kernels fan out over rayon.
//! Parallelism is only ever applied across independent output slots (rows
//! or elements) and reductions stay sequential, so the parallel and
//! sequential builds produce bitwise identical results. `kernels` exposes
//! both code paths; the public ops dispatch on size.

use crate::error::CoreError;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Checked constructor: the shape product must match the data length
    /// and, in checked builds, every scalar must be finite.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, CoreError> {
        let expect: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(CoreError::InvalidTensor { reason: format!("zero dimension in {shape:?}") });
        }
        if expect != data.len() {
            return Err(CoreError::InvalidTensor {
                reason: format!("shape {shape:?} wants {expect} scalars, got {}", data.len()),
            });
        }
        #[cfg(debug_assertions)]
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(CoreError::InvalidTensor { reason: format!("non-finite scalar {bad}") });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self { shape, data: vec![0.0; len] }
    }

    /// Rank-1 tensor over the given values.
    pub fn vector(data: Vec<f32>) -> Self {
        Self { shape: vec![data.len()], data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self, CoreError> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows of a rank-2 tensor; a rank-1 tensor counts as a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            2 => self.shape[0],
            _ => panic!("rows() on rank-{} tensor", self.shape.len()),
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            1 => self.shape[0],
            2 => self.shape[1],
            _ => panic!("cols() on rank-{} tensor", self.shape.len()),
        }
    }

    pub fn row(&self, r: usize) -> &[f32] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    /// Rank-2 transpose (a rank-1 tensor becomes a single column).
    pub fn transposed(&self) -> Tensor {
        let (m, n) = (self.rows(), self.cols());
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor { shape: vec![n, m], data: out }
    }

    /// Reinterprets the buffer as `rows x cols` without copying.
    pub fn reshaped(mut self, rows: usize, cols: usize) -> Result<Tensor, CoreError> {
        if rows * cols != self.data.len() {
            return Err(CoreError::InvalidTensor {
                reason: format!("cannot view {} scalars as {rows}x{cols}", self.data.len()),
            });
        }
        self.shape = vec![rows, cols];
        Ok(self)
    }
}

/// Low-level kernels. The `_seq` variants are the sequential fallback that
/// backs a `--no-default-features` build; the `_par` variants are rayon
/// versions producing bitwise identical output. Public so the bench suite
/// can pit them against each other directly.
pub mod kernels {
    #[cfg(feature = "parallel")]
    use rayon::prelude::*;

    /// Work threshold below which the dispatching ops stay sequential.
    pub const PAR_MIN_WORK: usize = 16 * 1024;
    #[cfg(feature = "parallel")]
    pub(crate) const PAR_CHUNK: usize = 4096;

    pub fn matmul_seq(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
        debug_assert_eq!(a.len(), m * k);
        debug_assert_eq!(b.len(), k * n);
        debug_assert_eq!(out.len(), m * n);
        for (i, out_row) in out.chunks_mut(n).enumerate() {
            matmul_row(&a[i * k..(i + 1) * k], b, n, out_row);
        }
    }

    #[cfg(feature = "parallel")]
    pub fn matmul_par(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
        debug_assert_eq!(a.len(), m * k);
        debug_assert_eq!(b.len(), k * n);
        debug_assert_eq!(out.len(), m * n);
        out.par_chunks_mut(n).enumerate().for_each(|(i, out_row)| {
            matmul_row(&a[i * k..(i + 1) * k], b, n, out_row);
        });
    }

    // One output row: out_row[j] = sum_p a_row[p] * b[p*n + j], accumulated
    // in index order so every build computes the identical f32 sum.
    #[inline]
    fn matmul_row(a_row: &[f32], b: &[f32], n: usize, out_row: &mut [f32]) {
        out_row.fill(0.0);
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }

    pub fn map_seq(x: &[f32], out: &mut [f32], f: impl Fn(f32) -> f32 + Sync) {
        for (o, &v) in out.iter_mut().zip(x) {
            *o = f(v);
        }
    }

    #[cfg(feature = "parallel")]
    pub fn map_par(x: &[f32], out: &mut [f32], f: impl Fn(f32) -> f32 + Sync) {
        out.par_chunks_mut(PAR_CHUNK).zip(x.par_chunks(PAR_CHUNK)).for_each(|(oc, xc)| {
            for (o, &v) in oc.iter_mut().zip(xc) {
                *o = f(v);
            }
        });
    }

    pub fn zip_seq(a: &[f32], b: &[f32], out: &mut [f32], f: impl Fn(f32, f32) -> f32 + Sync) {
        for ((o, &x), &y) in out.iter_mut().zip(a).zip(b) {
            *o = f(x, y);
        }
    }

    #[cfg(feature = "parallel")]
    pub fn zip_par(a: &[f32], b: &[f32], out: &mut [f32], f: impl Fn(f32, f32) -> f32 + Sync) {
        out.par_chunks_mut(PAR_CHUNK)
            .zip(a.par_chunks(PAR_CHUNK).zip(b.par_chunks(PAR_CHUNK)))
            .for_each(|(oc, (ac, bc))| {
                for ((o, &x), &y) in oc.iter_mut().zip(ac).zip(bc) {
                    *o = f(x, y);
                }
            });
    }
}

fn require_same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), CoreError> {
    if a.shape != b.shape {
        return Err(CoreError::ShapeMismatch {
            op,
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    Ok(())
}

/// Row-major matrix product. Rank-1 operands are treated as a single row.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, CoreError> {
    let (m, k) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    if k != k2 {
        return Err(CoreError::ShapeMismatch { op: "matmul", left: a.shape.clone(), right: b.shape.clone() });
    }
    let mut out = Tensor::zeros(vec![m, n]);
    #[cfg(feature = "parallel")]
    if m >= 2 && m * k * n >= kernels::PAR_MIN_WORK {
        kernels::matmul_par(&a.data, &b.data, m, k, n, &mut out.data);
        return Ok(out);
    }
    kernels::matmul_seq(&a.data, &b.data, m, k, n, &mut out.data);
    Ok(out)
}

fn dispatch_map(x: &Tensor, f: impl Fn(f32) -> f32 + Sync) -> Tensor {
    let mut out = Tensor::zeros(x.shape.clone());
    #[cfg(feature = "parallel")]
    if x.len() >= kernels::PAR_MIN_WORK {
        kernels::map_par(&x.data, &mut out.data, f);
        return out;
    }
    kernels::map_seq(&x.data, &mut out.data, f);
    out
}

fn dispatch_zip(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f32, f32) -> f32 + Sync,
) -> Result<Tensor, CoreError> {
    require_same_shape(op, a, b)?;
    let mut out = Tensor::zeros(a.shape.clone());
    #[cfg(feature = "parallel")]
    if a.len() >= kernels::PAR_MIN_WORK {
        kernels::zip_par(&a.data, &b.data, &mut out.data, f);
        return Ok(out);
    }
    kernels::zip_seq(&a.data, &b.data, &mut out.data, f);
    Ok(out)
}

/// max(0, x) elementwise.
pub fn relu_fwd(x: &Tensor) -> Tensor {
    dispatch_map(x, |v| if v > 0.0 { v } else { 0.0 })
}

/// Upstream gradient gated by the forward input: `up` where x > 0, else 0.
/// The gradient at exactly 0 is 0.
pub fn relu_bwd(x: &Tensor, up: &Tensor) -> Result<Tensor, CoreError> {
    dispatch_zip("relu_bwd", x, up, |xv, uv| if xv > 0.0 { uv } else { 0.0 })
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor, CoreError> {
    dispatch_zip("add", a, b, |x, y| x + y)
}

/// Adds `bias` (rank-1 of width cols) to every row of `x`.
pub fn add_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor, CoreError> {
    let n = x.cols();
    if bias.shape() != [n] {
        return Err(CoreError::ShapeMismatch {
            op: "add_bias",
            left: x.shape.clone(),
            right: bias.shape.clone(),
        });
    }
    let mut out = x.clone();
    for row in out.data.chunks_mut(n) {
        for (o, &b) in row.iter_mut().zip(&bias.data) {
            *o += b;
        }
    }
    Ok(out)
}

/// Per-column sums of a rank-2 tensor, accumulated row by row.
pub fn column_sums(x: &Tensor) -> Tensor {
    let n = x.cols();
    let mut out = vec![0.0f32; n];
    for row in x.data.chunks(n) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    Tensor::vector(out)
}

/// Mean softmax cross-entropy over a batch of logit rows, with the
/// gradient w.r.t. the logits: (softmax - onehot) / batch. Stabilized by
/// per-row max subtraction. The loss scalar is accumulated in f64 so a
/// saturated correct class reports its true tiny loss instead of rounding
/// to zero; the gradient tensor stays f32 like the rest of the model.
pub fn softmax_xent(logits: &Tensor, labels: &[usize]) -> Result<(f32, Tensor), CoreError> {
    let (batch, classes) = (logits.rows(), logits.cols());
    if labels.len() != batch {
        return Err(CoreError::ShapeMismatch {
            op: "softmax_xent",
            left: logits.shape.clone(),
            right: vec![labels.len()],
        });
    }
    for &l in labels {
        if l >= classes {
            return Err(CoreError::LabelOutOfRange { label: l, classes });
        }
    }
    let mut grad = Tensor::zeros(vec![batch, classes]);
    let mut row_losses = vec![0.0f64; batch];

    let compute_row = |r: usize, grad_row: &mut [f32], loss_slot: &mut f64| {
        let row = logits.row(r);
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f64;
        for (g, &v) in grad_row.iter_mut().zip(row) {
            let e = ((v - max) as f64).exp();
            *g = e as f32;
            sum += e;
        }
        let inv = (1.0 / sum) as f32;
        for g in grad_row.iter_mut() {
            *g *= inv;
        }
        // -log p[label] computed from the stabilized pieces.
        *loss_slot = sum.ln() - (row[labels[r]] - max) as f64;
        grad_row[labels[r]] -= 1.0;
        let scale = 1.0 / batch as f32;
        for g in grad_row.iter_mut() {
            *g *= scale;
        }
    };

    #[cfg(feature = "parallel")]
    if batch * classes >= kernels::PAR_MIN_WORK {
        use rayon::prelude::*;
        grad.data
            .par_chunks_mut(classes)
            .zip(row_losses.par_iter_mut())
            .enumerate()
            .for_each(|(r, (grad_row, loss_slot))| compute_row(r, grad_row, loss_slot));
        let loss = (row_losses.iter().sum::<f64>() / batch as f64) as f32;
        return Ok((loss, grad));
    }

    for r in 0..batch {
        let grad_row = &mut grad.data[r * classes..(r + 1) * classes];
        compute_row(r, grad_row, &mut row_losses[r]);
    }
    let loss = (row_losses.iter().sum::<f64>() / batch as f64) as f32;
    Ok((loss, grad))
}
