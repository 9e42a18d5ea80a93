//! The two-part model: a dense MLP producing the dense feature vector
//! (DFV) and a sparse MLP consuming (sparse features ++ DFV) into class
//! logits.
//!
//! Two gradient routes exist on purpose. The split route
//! ([`SparsePart::forward_backward`] for the loss-to-DFV factor, then
//! [`DensePart::backward`] for the chain through the dense weights) is
//! what the distributed workers run. [`MonolithicTrainer`] implements its
//! own fused joint backward pass and serves as the baseline the split
//! route is checked against.

use crate::error::CoreError;
use crate::optim::{AdamHyper, AdamState};
use crate::rng::Rng;
use crate::tensor::{self, Tensor};

/// Standard deviation for all weight and bias initialization.
pub const INIT_STDDEV: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Self { in_dim, out_dim, activation }
    }
}

/// Builds the conventional stack for a model half: relu on every hidden
/// layer, identity on the last.
pub fn layer_stack(input_dim: usize, hidden: &[usize], output_dim: usize) -> Vec<LayerSpec> {
    let mut specs = Vec::new();
    let mut width = input_dim;
    for &h in hidden {
        specs.push(LayerSpec::new(width, h, Activation::Relu));
        width = h;
    }
    specs.push(LayerSpec::new(width, output_dim, Activation::Identity));
    specs
}

/// Gradients for one layer, same shapes as the layer's weight and bias.
#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// A fully-connected stack with its parameters.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub specs: Vec<LayerSpec>,
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
}

/// Forward activations retained for a backward pass: per-layer inputs and
/// pre-activations, plus the final output.
pub struct Trace {
    inputs: Vec<Tensor>,
    pres: Vec<Tensor>,
    pub output: Tensor,
}

fn validate_specs(specs: &[LayerSpec]) -> Result<(), CoreError> {
    if specs.is_empty() {
        return Err(CoreError::EmptyLayerStack);
    }
    for pair in specs.windows(2) {
        if pair[0].out_dim != pair[1].in_dim {
            return Err(CoreError::ShapeMismatch {
                op: "layer_chain",
                left: vec![pair[0].in_dim, pair[0].out_dim],
                right: vec![pair[1].in_dim, pair[1].out_dim],
            });
        }
    }
    if specs.iter().any(|s| s.in_dim == 0 || s.out_dim == 0) {
        return Err(CoreError::InvalidTensor { reason: "zero layer width".into() });
    }
    Ok(())
}

impl Mlp {
    /// Initializes every weight and bias i.i.d. normal(0, 0.1^2) from the
    /// seeded generator. Draw order, which fixes the byte-level result:
    /// layer by layer, the weight matrix in row-major order, then the
    /// bias vector.
    pub fn init(specs: &[LayerSpec], seed: u64) -> Result<Self, CoreError> {
        validate_specs(specs)?;
        let mut rng = Rng::new(seed);
        let mut weights = Vec::with_capacity(specs.len());
        let mut biases = Vec::with_capacity(specs.len());
        for spec in specs {
            let w: Vec<f32> = (0..spec.in_dim * spec.out_dim)
                .map(|_| (rng.next_normal() * INIT_STDDEV) as f32)
                .collect();
            let b: Vec<f32> =
                (0..spec.out_dim).map(|_| (rng.next_normal() * INIT_STDDEV) as f32).collect();
            weights.push(Tensor::matrix(spec.in_dim, spec.out_dim, w)?);
            biases.push(Tensor::vector(b));
        }
        Ok(Self { specs: specs.to_vec(), weights, biases })
    }

    /// Builds an MLP around externally supplied tensors (e.g. pulled from
    /// a parameter server), in canonical order: l0.w, l0.b, l1.w, ...
    pub fn from_tensors(specs: &[LayerSpec], tensors: Vec<Tensor>) -> Result<Self, CoreError> {
        validate_specs(specs)?;
        if tensors.len() != specs.len() * 2 {
            return Err(CoreError::InvalidTensor {
                reason: format!("expected {} tensors, got {}", specs.len() * 2, tensors.len()),
            });
        }
        let mut weights = Vec::with_capacity(specs.len());
        let mut biases = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            let w = tensors[2 * i].clone();
            let b = tensors[2 * i + 1].clone();
            if w.shape() != [spec.in_dim, spec.out_dim] {
                return Err(CoreError::ShapeMismatch {
                    op: "mlp_from_tensors",
                    left: w.shape().to_vec(),
                    right: vec![spec.in_dim, spec.out_dim],
                });
            }
            if b.shape() != [spec.out_dim] {
                return Err(CoreError::ShapeMismatch {
                    op: "mlp_from_tensors",
                    left: b.shape().to_vec(),
                    right: vec![spec.out_dim],
                });
            }
            weights.push(w);
            biases.push(b);
        }
        Ok(Self { specs: specs.to_vec(), weights, biases })
    }

    pub fn input_dim(&self) -> usize {
        self.specs[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.specs.last().unwrap().out_dim
    }

    /// Parameter tensors in canonical order: l0.w, l0.b, l1.w, ...
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::with_capacity(self.specs.len() * 2);
        for i in 0..self.specs.len() {
            out.push(&self.weights[i]);
            out.push(&self.biases[i]);
        }
        out
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor, CoreError> {
        Ok(self.forward_trace(x)?.output)
    }

    pub fn forward_trace(&self, x: &Tensor) -> Result<Trace, CoreError> {
        if x.cols() != self.input_dim() {
            return Err(CoreError::ShapeMismatch {
                op: "mlp_forward",
                left: x.shape().to_vec(),
                right: vec![x.rows(), self.input_dim()],
            });
        }
        let batch = x.rows();
        let mut inputs = Vec::with_capacity(self.specs.len());
        let mut pres = Vec::with_capacity(self.specs.len());
        let mut a = x.clone().reshaped(batch, x.cols())?;
        for (i, spec) in self.specs.iter().enumerate() {
            let z = tensor::add_bias(&tensor::matmul(&a, &self.weights[i])?, &self.biases[i])?;
            let next = match spec.activation {
                Activation::Relu => tensor::relu_fwd(&z),
                Activation::Identity => z.clone(),
            };
            inputs.push(a);
            pres.push(z);
            a = next;
        }
        Ok(Trace { inputs, pres, output: a })
    }

    /// Reverse pass from an upstream gradient on the output. Returns
    /// per-layer grads and the gradient w.r.t. the stack's input.
    pub fn backward(&self, trace: &Trace, upstream: &Tensor) -> Result<(Vec<LayerGrads>, Tensor), CoreError> {
        if upstream.shape() != trace.output.shape() {
            return Err(CoreError::ShapeMismatch {
                op: "mlp_backward",
                left: upstream.shape().to_vec(),
                right: trace.output.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<LayerGrads>> = vec![None; self.specs.len()];
        let mut d_a = upstream.clone();
        for (i, spec) in self.specs.iter().enumerate().rev() {
            let d_z = match spec.activation {
                Activation::Relu => tensor::relu_bwd(&trace.pres[i], &d_a)?,
                Activation::Identity => d_a,
            };
            let weight = tensor::matmul(&trace.inputs[i].transposed(), &d_z)?;
            let bias = tensor::column_sums(&d_z);
            d_a = tensor::matmul(&d_z, &self.weights[i].transposed())?;
            grads[i] = Some(LayerGrads { weight, bias });
        }
        Ok((grads.into_iter().map(Option::unwrap).collect(), d_a))
    }
}

/// Canonical parameter names for one model half: `{prefix}.l{i}.w`,
/// `{prefix}.l{i}.b`, in the same order as [`Mlp::tensors`].
pub fn mlp_param_names(prefix: &str, layer_count: usize) -> Vec<String> {
    let mut names = Vec::with_capacity(layer_count * 2);
    for i in 0..layer_count {
        names.push(format!("{prefix}.l{i}.w"));
        names.push(format!("{prefix}.l{i}.b"));
    }
    names
}

/// Dense feature vector: the activation vector at the model split.
#[derive(Debug, Clone, PartialEq)]
pub struct Dfv {
    pub values: Tensor,
}

impl Dfv {
    pub fn new(values: Tensor) -> Self {
        Self { values }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// The dense half: raw dense input -> DFV.
#[derive(Debug, Clone)]
pub struct DensePart {
    pub mlp: Mlp,
}

impl DensePart {
    pub fn new(mlp: Mlp) -> Self {
        Self { mlp }
    }

    pub fn init(specs: &[LayerSpec], seed: u64) -> Result<Self, CoreError> {
        Ok(Self::new(Mlp::init(specs, seed)?))
    }

    pub fn dfv_dim(&self) -> usize {
        self.mlp.output_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.mlp.input_dim()
    }

    /// Forward pass for one sample (rank-1 input).
    pub fn forward(&self, dense_input: &Tensor) -> Result<Dfv, CoreError> {
        let out = self.mlp.forward(&dense_input.clone().reshaped(1, dense_input.len())?)?;
        Ok(Dfv::new(Tensor::vector(out.into_data())))
    }

    /// Batched forward, one DFV row per input row.
    pub fn forward_batch(&self, dense_inputs: &Tensor) -> Result<Tensor, CoreError> {
        self.mlp.forward(dense_inputs)
    }

    /// The dense side of the gradient split: pushes a loss-to-DFV gradient
    /// through the dense stack for one sample, recomputing the forward
    /// activations from `dense_input`.
    pub fn backward(&self, dense_input: &Tensor, dfv_grad: &Tensor) -> Result<Vec<LayerGrads>, CoreError> {
        if dfv_grad.len() != self.dfv_dim() {
            return Err(CoreError::ShapeMismatch {
                op: "dense_backward",
                left: dfv_grad.shape().to_vec(),
                right: vec![self.dfv_dim()],
            });
        }
        let x = dense_input.clone().reshaped(1, dense_input.len())?;
        let trace = self.mlp.forward_trace(&x)?;
        let up = dfv_grad.clone().reshaped(1, dfv_grad.len())?;
        let (grads, _) = self.mlp.backward(&trace, &up)?;
        Ok(grads)
    }
}

/// Output of the sparse half's combined forward/backward step.
pub struct SparseStep {
    pub loss: f32,
    pub logits: Tensor,
    pub grads: Vec<LayerGrads>,
    /// Loss gradient w.r.t. each sample's DFV, one row per batch row.
    pub dfv_grads: Tensor,
}

/// The sparse half: (sparse features ++ DFV) -> logits.
#[derive(Debug, Clone)]
pub struct SparsePart {
    pub mlp: Mlp,
    pub sparse_dim: usize,
    pub dfv_dim: usize,
}

impl SparsePart {
    pub fn new(mlp: Mlp, sparse_dim: usize, dfv_dim: usize) -> Result<Self, CoreError> {
        if mlp.input_dim() != sparse_dim + dfv_dim {
            return Err(CoreError::ShapeMismatch {
                op: "sparse_part",
                left: vec![mlp.input_dim()],
                right: vec![sparse_dim + dfv_dim],
            });
        }
        Ok(Self { mlp, sparse_dim, dfv_dim })
    }

    pub fn init(specs: &[LayerSpec], sparse_dim: usize, dfv_dim: usize, seed: u64) -> Result<Self, CoreError> {
        Self::new(Mlp::init(specs, seed)?, sparse_dim, dfv_dim)
    }

    pub fn num_classes(&self) -> usize {
        self.mlp.output_dim()
    }

    /// Forward and backward over a batch. Produces the sparse-parameter
    /// gradients and the loss-to-DFV gradient rows; dense parameters are
    /// never touched here.
    pub fn forward_backward(
        &self,
        sparse_input: &Tensor,
        dfvs: &Tensor,
        labels: &[usize],
    ) -> Result<SparseStep, CoreError> {
        if sparse_input.cols() != self.sparse_dim || dfvs.cols() != self.dfv_dim
            || sparse_input.rows() != dfvs.rows()
        {
            return Err(CoreError::ShapeMismatch {
                op: "sparse_forward_backward",
                left: sparse_input.shape().to_vec(),
                right: dfvs.shape().to_vec(),
            });
        }
        let joined = concat_cols(sparse_input, dfvs)?;
        let trace = self.mlp.forward_trace(&joined)?;
        let (loss, d_logits) = tensor::softmax_xent(&trace.output, labels)?;
        let (grads, d_joined) = self.mlp.backward(&trace, &d_logits)?;
        let dfv_grads = slice_cols(&d_joined, self.sparse_dim, self.sparse_dim + self.dfv_dim);
        Ok(SparseStep { loss, logits: trace.output, grads, dfv_grads })
    }
}

/// Columnwise concatenation of two batches with equal row counts.
pub fn concat_cols(a: &Tensor, b: &Tensor) -> Result<Tensor, CoreError> {
    if a.rows() != b.rows() {
        return Err(CoreError::ShapeMismatch {
            op: "concat_cols",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let (rows, ca, cb) = (a.rows(), a.cols(), b.cols());
    let mut data = Vec::with_capacity(rows * (ca + cb));
    for r in 0..rows {
        data.extend_from_slice(a.row(r));
        data.extend_from_slice(b.row(r));
    }
    Tensor::matrix(rows, ca + cb, data)
}

fn slice_cols(x: &Tensor, from: usize, to: usize) -> Tensor {
    let rows = x.rows();
    let mut data = Vec::with_capacity(rows * (to - from));
    for r in 0..rows {
        data.extend_from_slice(&x.row(r)[from..to]);
    }
    Tensor::matrix(rows, to - from, data).expect("slice_cols shapes")
}

/// Fraction of rows whose argmax matches the label.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> f32 {
    if labels.is_empty() {
        return 0.0;
    }
    let mut hits = 0usize;
    for (r, &label) in labels.iter().enumerate() {
        let row = logits.row(r);
        let mut best = 0usize;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        if best == label {
            hits += 1;
        }
    }
    hits as f32 / labels.len() as f32
}

/// Joint gradients of the whole network computed in one fused pass.
pub struct JointGrads {
    pub loss: f32,
    pub logits: Tensor,
    pub dense_grads: Vec<LayerGrads>,
    pub sparse_grads: Vec<LayerGrads>,
    pub dfv_grads: Tensor,
}

/// End-to-end gradients via the fused route: dense trace is reused for
/// the dense backward instead of being recomputed, and the whole batch is
/// differentiated in one pass. This is the route the split functions are
/// verified against.
pub fn joint_grads(
    dense: &DensePart,
    sparse: &SparsePart,
    dense_inputs: &Tensor,
    sparse_inputs: &Tensor,
    labels: &[usize],
) -> Result<JointGrads, CoreError> {
    let dense_trace = dense.mlp.forward_trace(dense_inputs)?;
    let joined = concat_cols(sparse_inputs, &dense_trace.output)?;
    let sparse_trace = sparse.mlp.forward_trace(&joined)?;
    let (loss, d_logits) = tensor::softmax_xent(&sparse_trace.output, labels)?;
    let (sparse_grads, d_joined) = sparse.mlp.backward(&sparse_trace, &d_logits)?;
    let dfv_grads = slice_cols(&d_joined, sparse.sparse_dim, sparse.sparse_dim + sparse.dfv_dim);
    let (dense_grads, _) = dense.mlp.backward(&dense_trace, &dfv_grads)?;
    Ok(JointGrads { loss, logits: sparse_trace.output, dense_grads, sparse_grads, dfv_grads })
}

/// Per-step training metrics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f32,
    pub accuracy: f32,
}

/// Conventional whole-model trainer: forward, fused backward and an Adam
/// update of both halves every step, all on local state.
pub struct MonolithicTrainer {
    pub dense: DensePart,
    pub sparse: SparsePart,
    dense_opt: Vec<(AdamState, AdamState)>,
    sparse_opt: Vec<(AdamState, AdamState)>,
}

impl MonolithicTrainer {
    pub fn new(dense: DensePart, sparse: SparsePart, hyper: AdamHyper) -> Self {
        let dense_opt = dense
            .mlp
            .specs
            .iter()
            .map(|s| {
                (
                    AdamState::new(vec![s.in_dim, s.out_dim], hyper),
                    AdamState::new(vec![s.out_dim], hyper),
                )
            })
            .collect();
        let sparse_opt = sparse
            .mlp
            .specs
            .iter()
            .map(|s| {
                (
                    AdamState::new(vec![s.in_dim, s.out_dim], hyper),
                    AdamState::new(vec![s.out_dim], hyper),
                )
            })
            .collect();
        Self { dense, sparse, dense_opt, sparse_opt }
    }

    pub fn step(
        &mut self,
        dense_inputs: &Tensor,
        sparse_inputs: &Tensor,
        labels: &[usize],
    ) -> Result<StepStats, CoreError> {
        let joint = joint_grads(&self.dense, &self.sparse, dense_inputs, sparse_inputs, labels)?;
        for (i, g) in joint.dense_grads.iter().enumerate() {
            self.dense_opt[i].0.apply(&mut self.dense.mlp.weights[i], &g.weight)?;
            self.dense_opt[i].1.apply(&mut self.dense.mlp.biases[i], &g.bias)?;
        }
        for (i, g) in joint.sparse_grads.iter().enumerate() {
            self.sparse_opt[i].0.apply(&mut self.sparse.mlp.weights[i], &g.weight)?;
            self.sparse_opt[i].1.apply(&mut self.sparse.mlp.biases[i], &g.bias)?;
        }
        Ok(StepStats { loss: joint.loss, accuracy: accuracy(&joint.logits, labels) })
    }
}
