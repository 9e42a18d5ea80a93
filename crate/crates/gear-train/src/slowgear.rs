//! The slowgear worker: serves DFV inference out of the TTL cache,
//! accumulates DFV-gradients per image, and applies the slow-cadence
//! dense updates through the parameter servers.
//!
//! The worker holds no durable model state of its own — dense parameters
//! are pulled fresh from the servers on every cache miss and every
//! averaged update, so the recompute-with-current-weights policy is
//! structural, not a caching choice.

use gear_core::model::{mlp_param_names, DensePart, LayerSpec, Mlp};
use gear_core::store::{AccumResult, Clock, ImageId, KvStore};
use gear_core::wire::{Endpoint, InferStatus, Message};
use gear_core::{CoreError, Tensor};

use crate::metrics::MetricsRow;
use crate::net::PsLink;
use crate::TrainError;

/// Cumulative traffic and work counters for one slowgear.
#[derive(Debug, Default, Clone, Copy)]
pub struct SlowgearCounters {
    pub infer_requests: u64,
    pub dense_forward_count: u64,
    pub dense_update_count: u64,
    pub grad_pushes: u64,
    pub dropped_grad_batches: u64,
}

pub struct Slowgear {
    index: usize,
    run_id: String,
    dense_specs: Vec<LayerSpec>,
    dense_names: Vec<String>,
    dfv_dim: usize,
    m: usize,
    store: KvStore,
    clock: Clock,
    counters: SlowgearCounters,
    rows: Vec<MetricsRow>,
    last_evicted_at: Option<u64>,
}

impl Slowgear {
    pub fn new(
        index: usize,
        run_id: String,
        dense_specs: Vec<LayerSpec>,
        ttl: u64,
        m: usize,
        clock: Clock,
    ) -> Self {
        assert!(m >= 1, "accumulation target must be at least 1");
        let dense_names = mlp_param_names("dense", dense_specs.len());
        let dfv_dim = dense_specs.last().expect("nonempty dense stack").out_dim;
        Self {
            index,
            run_id,
            dense_specs,
            dense_names,
            dfv_dim,
            m,
            store: KvStore::new(ttl),
            clock,
            counters: SlowgearCounters::default(),
            rows: Vec::new(),
            last_evicted_at: None,
        }
    }

    pub fn endpoint(&self) -> Endpoint {
        Endpoint::slowgear(self.index)
    }

    /// Loads this worker's partition of raw dense inputs.
    pub fn load_dense_inputs(&self, inputs: impl IntoIterator<Item = (ImageId, Vec<f32>)>) {
        for (id, raw) in inputs {
            self.store.insert_dense_input(id, raw);
        }
    }

    pub fn counters(&self) -> SlowgearCounters {
        self.counters
    }

    pub fn store(&self) -> &KvStore {
        &self.store
    }

    pub fn take_rows(&mut self) -> Vec<MetricsRow> {
        std::mem::take(&mut self.rows)
    }

    /// Serves one decoded message; `Some` is the reply for the sender's
    /// lane. Background eviction runs whenever the clock has advanced.
    pub fn handle_message(
        &mut self,
        msg: &Message,
        ps: &mut dyn PsLink,
    ) -> Result<Option<Message>, TrainError> {
        let now = self.clock.now();
        if self.last_evicted_at != Some(now) {
            self.store.evict_expired(now);
            self.last_evicted_at = Some(now);
        }
        match msg {
            Message::InferReq { image_id } => Ok(Some(self.handle_infer(*image_id, now, ps)?)),
            Message::GradPush { image_id, dfv_grad } => {
                self.handle_grad_push(*image_id, dfv_grad, now, ps)?;
                Ok(None)
            }
            Message::Shutdown => Ok(None),
            other => Err(TrainError::Protocol(format!(
                "slowgear cannot serve message kind {}",
                other.kind()
            ))),
        }
    }

    fn pull_dense(&self, ps: &mut dyn PsLink) -> Result<DensePart, TrainError> {
        let pulled = ps.pull(&self.dense_names)?;
        let tensors = pulled.into_iter().map(|p| p.tensor).collect();
        Ok(DensePart::new(Mlp::from_tensors(&self.dense_specs, tensors)?))
    }

    fn handle_infer(
        &mut self,
        image_id: ImageId,
        now: u64,
        ps: &mut dyn PsLink,
    ) -> Result<Message, TrainError> {
        self.counters.infer_requests += 1;
        let Some(raw) = self.store.dense_input(image_id) else {
            return Ok(Message::InferResp {
                image_id,
                status: InferStatus::UnknownImage,
                dfv: vec![],
            });
        };
        if let Some(dfv) = self.store.get_dfv(image_id, now) {
            return Ok(Message::InferResp { image_id, status: InferStatus::Ok, dfv });
        }
        let dense = self.pull_dense(ps)?;
        self.counters.dense_forward_count += 1;
        let dfv = dense.forward(&Tensor::vector(raw))?.values.into_data();
        self.store.put_dfv(image_id, dfv.clone(), now);
        Ok(Message::InferResp { image_id, status: InferStatus::Ok, dfv })
    }

    fn handle_grad_push(
        &mut self,
        image_id: ImageId,
        dfv_grad: &[f32],
        now: u64,
        ps: &mut dyn PsLink,
    ) -> Result<(), TrainError> {
        if dfv_grad.len() != self.dfv_dim {
            return Err(CoreError::ShapeMismatch {
                op: "grad_push",
                left: vec![dfv_grad.len()],
                right: vec![self.dfv_dim],
            }
            .into());
        }
        self.counters.grad_pushes += 1;
        if let AccumResult::Ready(avg) = self.store.accum_push(image_id, dfv_grad.to_vec(), self.m)?
        {
            match self.store.dense_input(image_id) {
                Some(raw) => {
                    let dense = self.pull_dense(ps)?;
                    let grads = dense.backward(&Tensor::vector(raw), &Tensor::vector(avg))?;
                    for (i, g) in grads.iter().enumerate() {
                        ps.push_grad(&self.dense_names[2 * i], &g.weight)?;
                        ps.push_grad(&self.dense_names[2 * i + 1], &g.bias)?;
                    }
                    self.counters.dense_update_count += 1;
                }
                // The image vanished between accumulation and readiness;
                // the whole averaged batch is unusable.
                None => self.counters.dropped_grad_batches += self.m as u64,
            }
        }
        self.append_row(now);
        Ok(())
    }

    fn append_row(&mut self, now: u64) {
        self.rows.push(MetricsRow {
            run_id: self.run_id.clone(),
            worker: self.endpoint().to_string(),
            step: self.counters.grad_pushes,
            time: now,
            loss: None,
            accuracy: None,
            dense_forward_count: self.counters.dense_forward_count,
            dense_update_count: self.counters.dense_update_count,
            cache_hits: self.store.hits(),
            cache_misses: self.store.misses(),
            skips: 0,
            dropped_grad_batches: self.counters.dropped_grad_batches,
        });
    }

    /// End of run: discards partial accumulators (counted as dropped) and
    /// emits the closing metrics row.
    pub fn finish(&mut self) {
        self.counters.dropped_grad_batches += self.store.drain_leftovers() as u64;
        self.append_row(self.clock.now());
    }
}
