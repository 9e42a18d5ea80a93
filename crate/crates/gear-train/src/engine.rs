//! Run engines: given a dataset and a topology description, wire up the
//! workers and drive a full training run, returning metrics rows, final
//! parameters, and aggregate counters.
//!
//! Three engines exist. `run_gear_inproc` dispatches every message
//! synchronously on the calling thread and is bit-for-bit deterministic
//! under the logical clock. `run_gear_socket` (in [`crate::socket`])
//! runs every worker on its own thread over TCP. `run_nogear` trains the
//! same split architecture as one conventional model and is the oracle
//! the gear runs are measured against.

use std::collections::HashMap;
use std::sync::Arc;

use gear_core::data::Dataset;
use gear_core::model::{layer_stack, DensePart, LayerSpec, MonolithicTrainer, SparsePart, StepStats};
use gear_core::model::mlp_param_names;
use gear_core::optim::AdamHyper;
use gear_core::rng::Rng;
use gear_core::store::{Clock, ImageId};
use gear_core::wire::{route_image, PulledParam};
use gear_core::Tensor;

use crate::fastgear::{Fastgear, FastgearCfg, Scheduler};
use crate::metrics::MetricsRow;
use crate::net::{InprocNet, InprocPsLink, InprocShared, MessageLog, PsLink};
use crate::pserver::{shard_assignments, ParamServer};
use crate::slowgear::Slowgear;
use crate::TrainError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Gear,
    Nogear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransportKind {
    Inproc,
    Socket,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClockMode {
    Logical,
    Wall,
}

/// Full description of one run. The model layer sizes are given as
/// hidden widths; input and output widths come from the dataset.
#[derive(Debug, Clone)]
pub struct RunParams {
    pub run_id: String,
    pub mode: Mode,
    pub transport: TransportKind,
    pub clock: ClockMode,
    pub num_fastgear: usize,
    pub num_slowgear: usize,
    pub num_param_servers: usize,
    pub ttl: u64,
    pub m: usize,
    pub seed: u64,
    /// Steps per fastgear.
    pub steps: u64,
    pub batch_size: usize,
    /// Socket transport only: how many inference requests a fastgear
    /// keeps in flight per slowgear connection.
    pub max_inflight: usize,
    pub hyper: AdamHyper,
    pub dense_hidden: Vec<usize>,
    pub sparse_hidden: Vec<usize>,
    pub dfv_dim: usize,
    /// Record every received frame for transcript comparison.
    pub log_messages: bool,
}

impl RunParams {
    pub fn dense_specs(&self, dataset: &Dataset) -> Vec<LayerSpec> {
        layer_stack(dataset.dense_dim, &self.dense_hidden, self.dfv_dim)
    }

    pub fn sparse_specs(&self, dataset: &Dataset) -> Vec<LayerSpec> {
        layer_stack(dataset.sparse_dim + self.dfv_dim, &self.sparse_hidden, dataset.num_classes)
    }
}

/// Counters summed over all workers at the end of a run.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct RunTotals {
    pub steps: u64,
    pub infer_requests: u64,
    pub dense_forward_count: u64,
    pub dense_update_count: u64,
    pub grad_pushes: u64,
    pub cache_hits: u64,
    pub cache_misses: u64,
    pub skips: u64,
    pub dropped_grad_batches: u64,
}

pub struct RunOutput {
    /// All workers' rows: fastgears in index order, then slowgears, each
    /// worker's rows in emission order.
    pub rows: Vec<MetricsRow>,
    /// Final parameters in registration order (dense stack, then sparse).
    pub final_params: Vec<PulledParam>,
    pub totals: RunTotals,
    /// Per-receiver frame transcripts, when `log_messages` was set.
    pub transcripts: Option<std::collections::BTreeMap<String, Vec<Vec<Vec<u8>>>>>,
}

pub(crate) struct Seeds {
    pub(crate) dense: u64,
    pub(crate) sparse: u64,
    pub(crate) fastgear: Vec<u64>,
}

/// One root stream feeds every derived seed, in a fixed order, so the
/// gear and baseline runs of the same root seed share model init and the
/// first fastgear's batch schedule.
pub(crate) fn derive_seeds(seed: u64, num_fastgear: usize) -> Seeds {
    let mut root = Rng::new(seed);
    Seeds {
        dense: root.derive(),
        sparse: root.derive(),
        fastgear: (0..num_fastgear).map(|_| root.derive()).collect(),
    }
}

pub(crate) fn validate(params: &RunParams, dataset: &Dataset) -> Result<(), TrainError> {
    let mut problems = Vec::new();
    if params.num_fastgear == 0 {
        problems.push("num_fastgear must be at least 1".to_string());
    }
    if params.mode == Mode::Gear && params.num_slowgear == 0 {
        problems.push("num_slowgear must be at least 1".to_string());
    }
    if params.num_param_servers == 0 {
        problems.push("num_param_servers must be at least 1".to_string());
    }
    if params.m == 0 {
        problems.push("m must be at least 1".to_string());
    }
    if params.batch_size == 0 {
        problems.push("batch_size must be at least 1".to_string());
    }
    if params.dfv_dim == 0 {
        problems.push("dfv_dim must be at least 1".to_string());
    }
    if dataset.samples.len() < params.num_fastgear {
        problems.push(format!(
            "{} samples cannot feed {} fastgears",
            dataset.samples.len(),
            params.num_fastgear
        ));
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(TrainError::Protocol(problems.join("; ")))
    }
}

pub(crate) fn make_clock(mode: ClockMode) -> Clock {
    match mode {
        ClockMode::Logical => Clock::logical(),
        ClockMode::Wall => Clock::wall(),
    }
}

/// Initializes both model halves from the derived seeds and registers
/// them across the server tier. Returns the servers, the name-to-shard
/// assignment, and the global registration order.
pub(crate) fn build_server_tier(
    params: &RunParams,
    dataset: &Dataset,
    seeds: &Seeds,
) -> Result<(Vec<Arc<ParamServer>>, HashMap<String, usize>, Vec<String>), TrainError> {
    let dense = DensePart::init(&params.dense_specs(dataset), seeds.dense)?;
    let sparse = SparsePart::init(
        &params.sparse_specs(dataset),
        dataset.sparse_dim,
        params.dfv_dim,
        seeds.sparse,
    )?;
    let mut names = mlp_param_names("dense", dense.mlp.specs.len());
    names.extend(mlp_param_names("sparse", sparse.mlp.specs.len()));
    let tensors: Vec<Tensor> =
        dense.mlp.tensors().into_iter().chain(sparse.mlp.tensors()).cloned().collect();

    let servers: Vec<Arc<ParamServer>> =
        (0..params.num_param_servers).map(|_| Arc::new(ParamServer::new(params.hyper))).collect();
    let assignment = shard_assignments(&names, params.num_param_servers);
    for (name, tensor) in names.iter().zip(tensors) {
        servers[assignment[name]].register(name, tensor)?;
    }
    Ok((servers, assignment, names))
}

/// Reads the final parameters straight off the server objects (no wire
/// traffic), in registration order.
pub(crate) fn collect_final_params(
    servers: &[Arc<ParamServer>],
    assignment: &HashMap<String, usize>,
    names: &[String],
) -> Result<Vec<PulledParam>, TrainError> {
    names
        .iter()
        .map(|name| {
            let mut got = servers[assignment[name]].pull(std::slice::from_ref(name))?;
            Ok(got.pop().expect("pull returns one param per name"))
        })
        .collect()
}

/// Fastgear shards: sample `i` goes to fastgear `i mod F`, preserving
/// relative order inside each shard.
pub(crate) fn fastgear_shards(dataset: &Dataset, num_fastgear: usize) -> Vec<Vec<gear_core::data::SampleRecord>> {
    let mut shards = vec![Vec::new(); num_fastgear];
    for (i, s) in dataset.samples.iter().enumerate() {
        shards[i % num_fastgear].push(s.clone());
    }
    shards
}

/// Slowgear shards: every dense blob lives on the slowgear its id routes
/// to, so inference requests always land on the owner.
pub(crate) fn slowgear_shards(dataset: &Dataset, num_slowgear: usize) -> Vec<Vec<(ImageId, Vec<f32>)>> {
    let mut shards = vec![Vec::new(); num_slowgear];
    for (id, raw) in &dataset.dense_inputs {
        shards[route_image(*id, num_slowgear)].push((*id, raw.clone()));
    }
    shards
}

pub(crate) fn accumulate_totals(totals: &mut RunTotals, fgs: &[Fastgear], sgs: &[Slowgear]) {
    for fg in fgs {
        totals.steps += fg.counters().steps;
        totals.skips += fg.counters().skips;
    }
    for sg in sgs {
        let c = sg.counters();
        totals.infer_requests += c.infer_requests;
        totals.dense_forward_count += c.dense_forward_count;
        totals.dense_update_count += c.dense_update_count;
        totals.grad_pushes += c.grad_pushes;
        totals.dropped_grad_batches += c.dropped_grad_batches;
        totals.cache_hits += sg.store().hits();
        totals.cache_misses += sg.store().misses();
    }
}

/// Deterministic single-threaded gear run over the in-process transport.
pub fn run_gear_inproc(params: &RunParams, dataset: &Dataset) -> Result<RunOutput, TrainError> {
    validate(params, dataset)?;
    let seeds = derive_seeds(params.seed, params.num_fastgear);
    let (servers, assignment, names) = build_server_tier(params, dataset, &seeds)?;
    let log = params.log_messages.then(|| Arc::new(MessageLog::default()));
    let shared = InprocShared { servers, assignment, log: log.clone() };
    let clock = make_clock(params.clock);

    let dense_specs = params.dense_specs(dataset);
    let mut sgs: Vec<Slowgear> = (0..params.num_slowgear)
        .map(|i| {
            Slowgear::new(i, params.run_id.clone(), dense_specs.clone(), params.ttl, params.m, clock.clone())
        })
        .collect();
    for (sg, shard) in sgs.iter().zip(slowgear_shards(dataset, params.num_slowgear)) {
        sg.load_dense_inputs(shard);
    }

    let sparse_specs = params.sparse_specs(dataset);
    let mut fgs: Vec<Fastgear> = fastgear_shards(dataset, params.num_fastgear)
        .into_iter()
        .enumerate()
        .map(|(i, shard)| {
            Fastgear::new(
                i,
                params.run_id.clone(),
                FastgearCfg {
                    sparse_specs: sparse_specs.clone(),
                    sparse_dim: dataset.sparse_dim,
                    dfv_dim: params.dfv_dim,
                    num_slowgear: params.num_slowgear,
                    shard,
                    batch_size: params.batch_size,
                    seed: seeds.fastgear[i],
                    clock: clock.clone(),
                },
            )
        })
        .collect();

    for _ in 0..params.steps {
        for (i, fg) in fgs.iter_mut().enumerate() {
            let mut net = InprocNet::new(i, &mut sgs, &shared);
            if let Err(e) = fg.run_one_scheduled_step(&mut net) {
                // Salvage what every worker recorded so far so the
                // caller can flush partial metrics.
                let worker = fg.endpoint().to_string();
                let mut rows = Vec::new();
                for fg in fgs.iter_mut() {
                    rows.extend(fg.take_rows());
                }
                for sg in sgs.iter_mut() {
                    rows.extend(sg.take_rows());
                }
                return Err(TrainError::Aborted { worker, reason: e.to_string(), rows });
            }
            clock.tick();
        }
    }
    for i in 0..fgs.len() {
        use crate::net::FgNet;
        let mut net = InprocNet::new(i, &mut sgs, &shared);
        net.shutdown()?;
    }
    for sg in sgs.iter_mut() {
        sg.finish();
        let mut ps = InprocPsLink { shared: &shared, from: sg.endpoint() };
        ps.shutdown()?;
    }

    let mut rows = Vec::new();
    for fg in fgs.iter_mut() {
        rows.extend(fg.take_rows());
    }
    for sg in sgs.iter_mut() {
        rows.extend(sg.take_rows());
    }
    let mut totals = RunTotals::default();
    accumulate_totals(&mut totals, &fgs, &sgs);
    let final_params = collect_final_params(&shared.servers, &shared.assignment, &names)?;
    Ok(RunOutput {
        rows,
        final_params,
        totals,
        transcripts: log.map(|l| l.receiver_transcripts()),
    })
}

fn nogear_step(
    trainer: &mut MonolithicTrainer,
    dataset: &Dataset,
    dense_by_id: &HashMap<ImageId, &Vec<f32>>,
    batch: &[usize],
) -> Result<StepStats, TrainError> {
    let mut dense_data = Vec::with_capacity(batch.len() * dataset.dense_dim);
    let mut sparse_data = Vec::with_capacity(batch.len() * dataset.sparse_dim);
    let mut labels = Vec::with_capacity(batch.len());
    for &pos in batch {
        let sample = &dataset.samples[pos];
        let raw = dense_by_id.get(&sample.sample_id).ok_or_else(|| {
            TrainError::Protocol(format!("no dense input for image {}", sample.sample_id))
        })?;
        dense_data.extend_from_slice(raw);
        sparse_data.extend_from_slice(sample.sparse_input.data());
        labels.push(sample.label);
    }
    let dense_in = Tensor::matrix(batch.len(), dataset.dense_dim, dense_data)?;
    let sparse_in = Tensor::matrix(batch.len(), dataset.sparse_dim, sparse_data)?;
    Ok(trainer.step(&dense_in, &sparse_in, &labels)?)
}

/// The baseline: one conventional trainer over the whole dataset, same
/// architecture, same init seeds, same batch schedule as fastgear 0.
pub fn run_nogear(params: &RunParams, dataset: &Dataset) -> Result<RunOutput, TrainError> {
    validate(params, dataset)?;
    let seeds = derive_seeds(params.seed, 1);
    let dense_specs = params.dense_specs(dataset);
    let sparse_specs = params.sparse_specs(dataset);
    let dense = DensePart::init(&dense_specs, seeds.dense)?;
    let sparse =
        SparsePart::init(&sparse_specs, dataset.sparse_dim, params.dfv_dim, seeds.sparse)?;
    let mut trainer = MonolithicTrainer::new(dense, sparse, params.hyper);
    let mut scheduler = Scheduler::new(dataset.samples.len(), seeds.fastgear[0]);
    let clock = make_clock(params.clock);

    let dense_by_id: HashMap<ImageId, &Vec<f32>> =
        dataset.dense_inputs.iter().map(|(id, raw)| (*id, raw)).collect();

    let worker_name = "nogear-0".to_string();
    let mut rows = Vec::with_capacity(params.steps as usize);
    let mut totals = RunTotals::default();
    for step in 1..=params.steps {
        let time = clock.now();
        let batch = scheduler.next_batch(params.batch_size);
        let stats = match nogear_step(&mut trainer, dataset, &dense_by_id, &batch) {
            Ok(stats) => stats,
            // Flush whatever was measured before the failing step so the
            // caller can keep the partial metrics.
            Err(e) => {
                return Err(TrainError::Aborted {
                    worker: worker_name,
                    reason: e.to_string(),
                    rows,
                });
            }
        };

        totals.steps = step;
        totals.dense_forward_count += batch.len() as u64;
        totals.dense_update_count += 1;
        rows.push(MetricsRow {
            run_id: params.run_id.clone(),
            worker: worker_name.clone(),
            step,
            time,
            loss: Some(stats.loss),
            accuracy: Some(stats.accuracy),
            dense_forward_count: totals.dense_forward_count,
            dense_update_count: totals.dense_update_count,
            cache_hits: 0,
            cache_misses: 0,
            skips: 0,
            dropped_grad_batches: 0,
        });
        clock.tick();
    }

    let mut names = mlp_param_names("dense", dense_specs.len());
    names.extend(mlp_param_names("sparse", sparse_specs.len()));
    let tensors: Vec<Tensor> = trainer
        .dense
        .mlp
        .tensors()
        .into_iter()
        .chain(trainer.sparse.mlp.tensors())
        .cloned()
        .collect();
    let final_params = names
        .into_iter()
        .zip(tensors)
        .map(|(name, tensor)| PulledParam { name, version: params.steps, tensor })
        .collect();
    Ok(RunOutput { rows, final_params, totals, transcripts: None })
}

/// Entry point used by the harness: dispatches on mode and transport.
pub fn run(params: &RunParams, dataset: &Dataset) -> Result<RunOutput, TrainError> {
    match (params.mode, params.transport) {
        (Mode::Nogear, _) => run_nogear(params, dataset),
        (Mode::Gear, TransportKind::Inproc) => run_gear_inproc(params, dataset),
        (Mode::Gear, TransportKind::Socket) => crate::socket::run_gear_socket(params, dataset),
    }
}
