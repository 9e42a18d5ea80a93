//! The fastgear worker: owns a shard of training samples, drives the
//! per-batch cycle (DFV inference, sparse forward/backward, gradient
//! pushes), and records one metrics row per step.

use gear_core::data::SampleRecord;
use gear_core::model::{accuracy, mlp_param_names, LayerSpec, Mlp, SparsePart};
use gear_core::rng::Rng;
use gear_core::store::Clock;
use gear_core::wire::{route_image, Endpoint, InferStatus};
use gear_core::Tensor;

use crate::metrics::MetricsRow;
use crate::net::FgNet;
use crate::TrainError;

/// Epoch-shuffled batch scheduler over shard positions. Each epoch is a
/// fresh Fisher–Yates permutation; batches that straddle an epoch
/// boundary draw the remainder from the next permutation, so every batch
/// has the configured size.
pub struct Scheduler {
    rng: Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl Scheduler {
    pub fn new(len: usize, seed: u64) -> Self {
        assert!(len > 0, "scheduler needs a nonempty shard");
        let mut s = Self { rng: Rng::new(seed), order: (0..len).collect(), cursor: 0 };
        s.rng.shuffle(&mut s.order);
        s
    }

    fn next(&mut self) -> usize {
        if self.cursor == self.order.len() {
            self.rng.shuffle(&mut self.order);
            self.cursor = 0;
        }
        let pos = self.order[self.cursor];
        self.cursor += 1;
        pos
    }

    pub fn next_batch(&mut self, batch_size: usize) -> Vec<usize> {
        (0..batch_size).map(|_| self.next()).collect()
    }
}

/// Everything a fastgear needs at construction time.
pub struct FastgearCfg {
    pub sparse_specs: Vec<LayerSpec>,
    pub sparse_dim: usize,
    pub dfv_dim: usize,
    pub num_slowgear: usize,
    pub shard: Vec<SampleRecord>,
    pub batch_size: usize,
    pub seed: u64,
    pub clock: Clock,
}

#[derive(Debug, Default, Clone, Copy)]
pub struct FastgearCounters {
    pub steps: u64,
    pub skips: u64,
}

/// Per-step training statistics. `None` means the whole batch was
/// skipped and no optimization happened.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: Option<f32>,
    pub accuracy: Option<f32>,
}

pub struct Fastgear {
    index: usize,
    run_id: String,
    sparse_specs: Vec<LayerSpec>,
    sparse_names: Vec<String>,
    sparse_dim: usize,
    dfv_dim: usize,
    num_slowgear: usize,
    shard: Vec<SampleRecord>,
    batch_size: usize,
    scheduler: Scheduler,
    clock: Clock,
    counters: FastgearCounters,
    rows: Vec<MetricsRow>,
}

impl Fastgear {
    pub fn new(index: usize, run_id: String, cfg: FastgearCfg) -> Self {
        assert!(cfg.batch_size >= 1, "batch size must be at least 1");
        assert!(cfg.num_slowgear >= 1, "need at least one slowgear");
        let sparse_names = mlp_param_names("sparse", cfg.sparse_specs.len());
        let scheduler = Scheduler::new(cfg.shard.len(), cfg.seed);
        Self {
            index,
            run_id,
            sparse_specs: cfg.sparse_specs,
            sparse_names,
            sparse_dim: cfg.sparse_dim,
            dfv_dim: cfg.dfv_dim,
            num_slowgear: cfg.num_slowgear,
            shard: cfg.shard,
            batch_size: cfg.batch_size,
            scheduler,
            clock: cfg.clock,
            counters: FastgearCounters::default(),
            rows: Vec::new(),
        }
    }

    pub fn endpoint(&self) -> Endpoint {
        Endpoint::fastgear(self.index)
    }

    pub fn counters(&self) -> FastgearCounters {
        self.counters
    }

    pub fn take_rows(&mut self) -> Vec<MetricsRow> {
        std::mem::take(&mut self.rows)
    }

    fn owner(&self, image_id: u64) -> usize {
        route_image(image_id, self.num_slowgear)
    }

    /// One full batch cycle against the network. Samples whose image the
    /// owning slowgear does not know are skipped; the rest train the
    /// sparse half and send their DFV-gradients back.
    pub fn train_step(&mut self, net: &mut dyn FgNet) -> Result<StepStats, TrainError> {
        let batch = self.scheduler.next_batch(self.batch_size);
        let reqs: Vec<(usize, u64)> = batch
            .iter()
            .map(|&pos| {
                let id = self.shard[pos].sample_id;
                (self.owner(id), id)
            })
            .collect();
        let resps = net.infer_batch(&reqs)?;

        let mut kept: Vec<usize> = Vec::with_capacity(batch.len());
        let mut dfv_data: Vec<f32> = Vec::with_capacity(batch.len() * self.dfv_dim);
        for (&pos, (status, dfv)) in batch.iter().zip(resps) {
            match status {
                InferStatus::Ok => {
                    if dfv.len() != self.dfv_dim {
                        return Err(TrainError::Protocol(format!(
                            "inference response carries {} values, expected {}",
                            dfv.len(),
                            self.dfv_dim
                        )));
                    }
                    kept.push(pos);
                    dfv_data.extend_from_slice(&dfv);
                }
                InferStatus::UnknownImage => self.counters.skips += 1,
            }
        }
        if kept.is_empty() {
            return Ok(StepStats { loss: None, accuracy: None });
        }

        let pulled = net.ps().pull(&self.sparse_names)?;
        let tensors = pulled.into_iter().map(|p| p.tensor).collect();
        let sparse = SparsePart::new(
            Mlp::from_tensors(&self.sparse_specs, tensors)?,
            self.sparse_dim,
            self.dfv_dim,
        )?;

        let mut sparse_data: Vec<f32> = Vec::with_capacity(kept.len() * self.sparse_dim);
        let mut labels: Vec<usize> = Vec::with_capacity(kept.len());
        for &pos in &kept {
            sparse_data.extend_from_slice(self.shard[pos].sparse_input.data());
            labels.push(self.shard[pos].label);
        }
        let sparse_input = Tensor::matrix(kept.len(), self.sparse_dim, sparse_data)?;
        let dfvs = Tensor::matrix(kept.len(), self.dfv_dim, dfv_data)?;

        let step = sparse.forward_backward(&sparse_input, &dfvs, &labels)?;

        for (i, g) in step.grads.iter().enumerate() {
            net.ps().push_grad(&self.sparse_names[2 * i], &g.weight)?;
            net.ps().push_grad(&self.sparse_names[2 * i + 1], &g.bias)?;
        }
        for (row, &pos) in kept.iter().enumerate() {
            let id = self.shard[pos].sample_id;
            net.grad_push(self.owner(id), id, step.dfv_grads.row(row).to_vec())?;
        }

        Ok(StepStats {
            loss: Some(step.loss),
            accuracy: Some(accuracy(&step.logits, &labels)),
        })
    }

    /// Runs one step and records its metrics row. `time` is read before
    /// the step so rows align with the clock value the DFV lookups saw.
    pub fn run_one_scheduled_step(&mut self, net: &mut dyn FgNet) -> Result<StepStats, TrainError> {
        let time = self.clock.now();
        let stats = self.train_step(net)?;
        self.counters.steps += 1;
        self.rows.push(MetricsRow {
            run_id: self.run_id.clone(),
            worker: self.endpoint().to_string(),
            step: self.counters.steps,
            time,
            loss: stats.loss,
            accuracy: stats.accuracy,
            dense_forward_count: 0,
            dense_update_count: 0,
            cache_hits: 0,
            cache_misses: 0,
            skips: self.counters.skips,
            dropped_grad_batches: 0,
        });
        Ok(stats)
    }
}
