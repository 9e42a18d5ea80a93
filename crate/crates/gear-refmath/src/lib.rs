//! Deliberately naive 64-bit reference implementations.
//!
//! Everything in this crate exists to check the production crates from the
//! outside: triple-loop matmul, a plain MLP forward pass, a textbook Adam
//! recurrence, central finite differences, and small comparison helpers.
//! Nothing here may call into the production crates, and the production
//! crates may only depend on this one from their test suites.

/// Naive triple-loop matrix product, row-major: `a` is m x k, `b` is k x n.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a[i * k + p] * b[p * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// Mean cross-entropy of softmax(logits) against integer labels.
/// `logits` is batch x classes, row-major. Max-subtraction stabilized.
pub fn softmax_xent_loss(logits: &[f64], batch: usize, classes: usize, labels: &[usize]) -> f64 {
    assert_eq!(logits.len(), batch * classes);
    assert_eq!(labels.len(), batch);
    let mut total = 0.0;
    for r in 0..batch {
        let row = &logits[r * classes..(r + 1) * classes];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_sum: f64 = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        total += log_sum - (row[labels[r]] - max);
    }
    total / batch as f64
}

/// One fully-connected layer stack evaluated in f64.
#[derive(Debug, Clone)]
pub struct RefMlp {
    /// Per layer: (in_dim, out_dim, relu_after).
    pub layers: Vec<(usize, usize, bool)>,
    /// Per layer weight matrix, row-major in_dim x out_dim.
    pub weights: Vec<Vec<f64>>,
    /// Per layer bias vector of out_dim.
    pub biases: Vec<Vec<f64>>,
}

impl RefMlp {
    pub fn forward(&self, input: &[f64], batch: usize) -> Vec<f64> {
        let mut x = input.to_vec();
        let mut width = self.layers[0].0;
        assert_eq!(input.len(), batch * width);
        for (li, &(in_dim, out_dim, relu)) in self.layers.iter().enumerate() {
            assert_eq!(width, in_dim);
            let mut y = matmul(&x, &self.weights[li], batch, in_dim, out_dim);
            for r in 0..batch {
                for c in 0..out_dim {
                    y[r * out_dim + c] += self.biases[li][c];
                    if relu && y[r * out_dim + c] < 0.0 {
                        y[r * out_dim + c] = 0.0;
                    }
                }
            }
            x = y;
            width = out_dim;
        }
        x
    }

    /// Flattened view of all parameters, layer by layer, weight then bias.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for li in 0..self.layers.len() {
            out.extend_from_slice(&self.weights[li]);
            out.extend_from_slice(&self.biases[li]);
        }
        out
    }

    /// Inverse of [`RefMlp::flat_params`].
    pub fn set_flat_params(&mut self, flat: &[f64]) {
        let mut pos = 0;
        for li in 0..self.layers.len() {
            let w = self.weights[li].len();
            self.weights[li].copy_from_slice(&flat[pos..pos + w]);
            pos += w;
            let b = self.biases[li].len();
            self.biases[li].copy_from_slice(&flat[pos..pos + b]);
            pos += b;
        }
        assert_eq!(pos, flat.len());
    }
}

/// The full split network evaluated in one piece: dense MLP produces a
/// feature vector per row, which is concatenated to the sparse input and
/// pushed through the sparse MLP to a mean cross-entropy loss.
#[derive(Debug, Clone)]
pub struct RefSplitNet {
    pub dense: RefMlp,
    pub sparse: RefMlp,
}

impl RefSplitNet {
    pub fn loss(
        &self,
        dense_in: &[f64],
        sparse_in: &[f64],
        batch: usize,
        labels: &[usize],
    ) -> f64 {
        let dfv_dim = self.dense.layers.last().unwrap().1;
        let sparse_dim = sparse_in.len() / batch;
        let dfv = self.dense.forward(dense_in, batch);
        let mut joined = Vec::with_capacity(batch * (sparse_dim + dfv_dim));
        for r in 0..batch {
            joined.extend_from_slice(&sparse_in[r * sparse_dim..(r + 1) * sparse_dim]);
            joined.extend_from_slice(&dfv[r * dfv_dim..(r + 1) * dfv_dim]);
        }
        let classes = self.sparse.layers.last().unwrap().1;
        let logits = self.sparse.forward(&joined, batch);
        softmax_xent_loss(&logits, batch, classes, labels)
    }
}

/// Textbook Adam with bias correction, kept in f64 throughout.
#[derive(Debug, Clone)]
pub struct RefAdam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl RefAdam {
    pub fn new(dim: usize, lr: f64, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Self { lr, beta1, beta2, epsilon, m: vec![0.0; dim], v: vec![0.0; dim], t: 0 }
    }

    pub fn step(&mut self, param: &mut [f64], grad: &[f64]) {
        assert_eq!(param.len(), grad.len());
        assert_eq!(param.len(), self.m.len());
        self.t += 1;
        let t = self.t as i32;
        for i in 0..param.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / (1.0 - self.beta1.powi(t));
            let v_hat = self.v[i] / (1.0 - self.beta2.powi(t));
            param[i] -= self.lr * m_hat / (v_hat.sqrt() + self.epsilon);
        }
    }
}

/// Central finite differences of `f` at `at`, step `h` per coordinate.
pub fn central_difference<F: FnMut(&[f64]) -> f64>(at: &[f64], mut f: F, h: f64) -> Vec<f64> {
    let mut grad = vec![0.0; at.len()];
    let mut x = at.to_vec();
    for i in 0..at.len() {
        let orig = x[i];
        x[i] = orig + h;
        let fp = f(&x);
        x[i] = orig - h;
        let fm = f(&x);
        x[i] = orig;
        grad[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Elementwise mean of equally sized vectors.
pub fn mean_vectors(vs: &[Vec<f64>]) -> Vec<f64> {
    assert!(!vs.is_empty());
    let dim = vs[0].len();
    let mut out = vec![0.0; dim];
    for v in vs {
        assert_eq!(v.len(), dim);
        for (o, x) in out.iter_mut().zip(v) {
            *o += x;
        }
    }
    for o in &mut out {
        *o /= vs.len() as f64;
    }
    out
}

pub fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |acc, x| acc.max(x.abs()))
}

/// Worst relative error between `got` and `want`, with a denominator floor
/// so near-zero oracle entries do not blow the ratio up.
pub fn max_rel_err(got: &[f64], want: &[f64], floor: f64) -> f64 {
    assert_eq!(got.len(), want.len());
    let mut worst = 0.0f64;
    for (&g, &w) in got.iter().zip(want) {
        let denom = g.abs().max(w.abs()).max(floor);
        worst = worst.max((g - w).abs() / denom);
    }
    worst
}

/// `max_rel_err` with the floor derived from the oracle's own scale:
/// 1e-3 of its inf-norm, never below `min_floor`.
pub fn max_rel_err_scaled(got: &[f64], want: &[f64], min_floor: f64) -> f64 {
    let floor = (1e-3 * inf_norm(want)).max(min_floor);
    max_rel_err(got, want, floor)
}

pub fn widen(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let a = vec![1.0, 0.0, 0.0, 1.0];
        let b = vec![5.0, 6.0, 7.0, 8.0];
        assert_eq!(matmul(&a, &b, 2, 2, 2), b);
    }

    #[test]
    fn xent_uniform_is_ln_c() {
        let logits = vec![0.3; 2 * 100];
        let loss = softmax_xent_loss(&logits, 2, 100, &[7, 42]);
        assert!((loss - (100f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn central_difference_of_quadratic() {
        let at = vec![1.0, -2.0, 3.0];
        let grad = central_difference(&at, |x| x.iter().map(|v| v * v).sum(), 1e-5);
        for (g, a) in grad.iter().zip(&at) {
            assert!((g - 2.0 * a).abs() < 1e-8);
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut adam = RefAdam::new(1, 1e-4, 0.9, 0.999, 1e-8);
        let mut p = vec![1.0];
        adam.step(&mut p, &[1.0]);
        assert!((p[0] - (1.0 - 1e-4)).abs() < 1e-9);
    }
}
