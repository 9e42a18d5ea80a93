//! TCP transport: every worker runs on its own thread, every edge of the
//! topology is one socket carrying wire frames. Loopback only — this is
//! an experiment framework, not a deployment story.
//!
//! Ordering guarantees come entirely from per-connection FIFO plus
//! serial processing at each receiver: a slowgear funnels all its
//! connections into one processing loop, and a parameter server handles
//! each connection on its own thread against per-tensor locks, so
//! messages that must be seen in order always share a connection.

use std::collections::HashMap;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::{mpsc, Arc};
use std::thread::{self, JoinHandle};

use gear_core::data::Dataset;
use gear_core::store::ImageId;
use gear_core::wire::{
    self, read_frame, write_frame, Endpoint, InferStatus, Message, PulledParam, KIND_SHUTDOWN,
};
use gear_core::Tensor;

use crate::engine::{
    accumulate_totals, build_server_tier, collect_final_params, derive_seeds, fastgear_shards,
    make_clock, slowgear_shards, validate, RunOutput, RunParams, RunTotals,
};
use crate::fastgear::{Fastgear, FastgearCfg};
use crate::net::{grouped_pull, FgNet, MessageLog, PsLink};
use crate::pserver::ParamServer;
use crate::slowgear::Slowgear;
use crate::TrainError;

fn connect(addr: SocketAddr) -> Result<TcpStream, TrainError> {
    let stream = TcpStream::connect(addr)?;
    stream.set_nodelay(true)?;
    Ok(stream)
}

fn record(log: &Option<Arc<MessageLog>>, receiver: &Endpoint, lane: &str, frame: &[u8]) {
    if let Some(log) = log {
        log.record(&receiver.to_string(), lane, frame);
    }
}

/// One frame that must exist: read EOF here means the peer broke the
/// protocol (clean shutdown always ends with SHUTDOWN, not a close).
fn expect_frame(stream: &mut TcpStream, from: &Endpoint) -> Result<Vec<u8>, TrainError> {
    read_frame(stream)?.ok_or_else(|| TrainError::Disconnected { endpoint: from.to_string() })
}

/// Parameter-server link over one socket per shard.
pub struct SocketPsLink {
    from: Endpoint,
    streams: Vec<TcpStream>,
    assignment: Arc<HashMap<String, usize>>,
    log: Option<Arc<MessageLog>>,
}

impl SocketPsLink {
    pub fn connect_all(
        from: Endpoint,
        ps_addrs: &[SocketAddr],
        assignment: Arc<HashMap<String, usize>>,
        log: Option<Arc<MessageLog>>,
    ) -> Result<Self, TrainError> {
        let streams = ps_addrs.iter().map(|&a| connect(a)).collect::<Result<_, _>>()?;
        Ok(Self { from, streams, assignment, log })
    }

    fn round_trip(&mut self, shard: usize, req: Message) -> Result<Message, TrainError> {
        write_frame(&mut self.streams[shard], &req)?;
        let server = Endpoint::param_server(shard);
        let frame = expect_frame(&mut self.streams[shard], &server)?;
        record(&self.log, &self.from, &server.to_string(), &frame);
        Ok(wire::decode(&frame)?)
    }
}

impl PsLink for SocketPsLink {
    fn pull(&mut self, names: &[String]) -> Result<Vec<PulledParam>, TrainError> {
        let assignment = Arc::clone(&self.assignment);
        grouped_pull(names, &assignment, |shard, req| self.round_trip(shard, req))
    }

    fn push_grad(&mut self, name: &str, grad: &Tensor) -> Result<(), TrainError> {
        let shard = *self
            .assignment
            .get(name)
            .ok_or_else(|| TrainError::UnknownParam { name: name.to_string() })?;
        let msg = Message::ParamGradPush { name: name.to_string(), grad: grad.clone() };
        write_frame(&mut self.streams[shard], &msg)?;
        Ok(())
    }

    fn shutdown(&mut self) -> Result<(), TrainError> {
        for stream in &mut self.streams {
            write_frame(stream, &Message::Shutdown)?;
        }
        Ok(())
    }
}

/// The fastgear's network over sockets: one connection per slowgear with
/// a bounded pipeline of in-flight inference requests, plus the server
/// link.
pub struct SocketFgNet {
    from: Endpoint,
    sg_streams: Vec<TcpStream>,
    ps_link: SocketPsLink,
    max_inflight: usize,
    log: Option<Arc<MessageLog>>,
}

impl SocketFgNet {
    #[allow(clippy::too_many_arguments)]
    pub fn connect_all(
        fg_index: usize,
        sg_addrs: &[SocketAddr],
        ps_addrs: &[SocketAddr],
        assignment: Arc<HashMap<String, usize>>,
        max_inflight: usize,
        log: Option<Arc<MessageLog>>,
    ) -> Result<Self, TrainError> {
        assert!(max_inflight >= 1, "pipeline window must be at least 1");
        let from = Endpoint::fastgear(fg_index);
        let sg_streams = sg_addrs.iter().map(|&a| connect(a)).collect::<Result<_, _>>()?;
        let ps_link = SocketPsLink::connect_all(from, ps_addrs, assignment, log.clone())?;
        Ok(Self { from, sg_streams, ps_link, max_inflight, log })
    }

    fn read_infer_resp(&mut self, sg: usize) -> Result<(ImageId, InferStatus, Vec<f32>), TrainError> {
        let sg_ep = Endpoint::slowgear(sg);
        let frame = expect_frame(&mut self.sg_streams[sg], &sg_ep)?;
        record(&self.log, &self.from, &sg_ep.to_string(), &frame);
        match wire::decode(&frame)? {
            Message::InferResp { image_id, status, dfv } => Ok((image_id, status, dfv)),
            other => {
                Err(TrainError::Protocol(format!("expected inference response, got {other:?}")))
            }
        }
    }
}

impl FgNet for SocketFgNet {
    /// Pipelined resolution: up to `max_inflight` requests are on the
    /// wire at once; responses are consumed in request order (each
    /// slowgear answers its own connection in FIFO order, so reading the
    /// next pending request's stream yields exactly its response).
    fn infer_batch(
        &mut self,
        reqs: &[(usize, ImageId)],
    ) -> Result<Vec<(InferStatus, Vec<f32>)>, TrainError> {
        let mut out = Vec::with_capacity(reqs.len());
        let mut sent = 0;
        while out.len() < reqs.len() {
            while sent < reqs.len() && sent - out.len() < self.max_inflight {
                let (sg, image_id) = reqs[sent];
                write_frame(&mut self.sg_streams[sg], &Message::InferReq { image_id })?;
                sent += 1;
            }
            let (want_sg, want_id) = reqs[out.len()];
            let (got_id, status, dfv) = self.read_infer_resp(want_sg)?;
            if got_id != want_id {
                return Err(TrainError::Protocol(format!(
                    "response for image {got_id} arrived while waiting for {want_id}"
                )));
            }
            out.push((status, dfv));
        }
        Ok(out)
    }

    fn grad_push(&mut self, sg: usize, image_id: ImageId, grad: Vec<f32>) -> Result<(), TrainError> {
        let msg = Message::GradPush { image_id, dfv_grad: grad };
        write_frame(&mut self.sg_streams[sg], &msg)?;
        Ok(())
    }

    fn ps(&mut self) -> &mut dyn PsLink {
        &mut self.ps_link
    }

    fn shutdown(&mut self) -> Result<(), TrainError> {
        for stream in &mut self.sg_streams {
            write_frame(stream, &Message::Shutdown)?;
        }
        self.ps_link.shutdown()
    }
}

/// Runs one slowgear to completion: accepts one connection per fastgear,
/// funnels all frames through a single serial processing loop, and exits
/// after every fastgear has said SHUTDOWN.
#[allow(clippy::too_many_arguments)]
fn run_slowgear_socket(
    mut sg: Slowgear,
    listener: TcpListener,
    num_fastgear: usize,
    ps_addrs: Vec<SocketAddr>,
    assignment: Arc<HashMap<String, usize>>,
    log: Option<Arc<MessageLog>>,
) -> Result<Slowgear, TrainError> {
    let mut ps = SocketPsLink::connect_all(sg.endpoint(), &ps_addrs, assignment, log.clone())?;

    let (tx, rx) = mpsc::channel::<(usize, Vec<u8>)>();
    let mut writers = Vec::with_capacity(num_fastgear);
    let mut readers = Vec::with_capacity(num_fastgear);
    for conn_id in 0..num_fastgear {
        let (stream, _) = listener.accept()?;
        stream.set_nodelay(true)?;
        writers.push(stream.try_clone()?);
        let tx = tx.clone();
        readers.push(thread::spawn(move || {
            let mut stream = stream;
            while let Ok(Some(frame)) = read_frame(&mut stream) {
                let last = frame.get(4) == Some(&KIND_SHUTDOWN);
                if tx.send((conn_id, frame)).is_err() || last {
                    break;
                }
            }
        }));
    }
    drop(tx);

    let endpoint = sg.endpoint();
    let mut shutdowns = 0;
    while shutdowns < num_fastgear {
        let (conn_id, frame) = rx
            .recv()
            .map_err(|_| TrainError::Disconnected { endpoint: endpoint.to_string() })?;
        record(&log, &endpoint, &format!("conn-{conn_id}"), &frame);
        let msg = wire::decode(&frame)?;
        if matches!(msg, Message::Shutdown) {
            shutdowns += 1;
        }
        if let Some(reply) = sg.handle_message(&msg, &mut ps)? {
            write_frame(&mut writers[conn_id], &reply)?;
        }
    }
    for r in readers {
        let _ = r.join();
    }
    sg.finish();
    ps.shutdown()?;
    Ok(sg)
}

/// Runs one parameter-server listener: every connection gets its own
/// handler thread over the shared server state, ending on that peer's
/// SHUTDOWN (or close).
fn run_ps_socket(
    server: Arc<ParamServer>,
    index: usize,
    listener: TcpListener,
    expected_conns: usize,
    log: Option<Arc<MessageLog>>,
) -> Result<(), TrainError> {
    let endpoint = Endpoint::param_server(index);
    let mut handlers: Vec<JoinHandle<Result<(), TrainError>>> = Vec::with_capacity(expected_conns);
    for conn_id in 0..expected_conns {
        let (stream, _) = listener.accept()?;
        stream.set_nodelay(true)?;
        let server = Arc::clone(&server);
        let log = log.clone();
        handlers.push(thread::spawn(move || {
            let mut reader = stream.try_clone()?;
            let mut writer = stream;
            while let Some(frame) = read_frame(&mut reader)? {
                record(&log, &endpoint, &format!("conn-{conn_id}"), &frame);
                let msg = wire::decode(&frame)?;
                let done = matches!(msg, Message::Shutdown);
                if let Some(reply) = server.handle(&msg)? {
                    write_frame(&mut writer, &reply)?;
                }
                if done {
                    break;
                }
            }
            Ok(())
        }));
    }
    for h in handlers {
        h.join().map_err(|_| TrainError::WorkerFailed {
            worker: endpoint.to_string(),
            reason: "connection handler panicked".into(),
        })??;
    }
    Ok(())
}

fn join_worker<T>(handle: JoinHandle<Result<T, TrainError>>, who: Endpoint) -> Result<T, TrainError> {
    handle
        .join()
        .map_err(|_| TrainError::WorkerFailed { worker: who.to_string(), reason: "panicked".into() })?
}

/// Full gear run over TCP. Matches `run_gear_inproc` in wiring and
/// protocol; scheduling across workers is OS-thread order, so metrics
/// timing is only reproducible under the logical clock with one worker
/// of each kind.
pub fn run_gear_socket(params: &RunParams, dataset: &Dataset) -> Result<RunOutput, TrainError> {
    validate(params, dataset)?;
    let seeds = derive_seeds(params.seed, params.num_fastgear);
    let (servers, assignment, names) = build_server_tier(params, dataset, &seeds)?;
    let assignment = Arc::new(assignment);
    let log = params.log_messages.then(|| Arc::new(MessageLog::default()));
    let clock = make_clock(params.clock);

    let mut ps_addrs = Vec::with_capacity(params.num_param_servers);
    let mut ps_handles = Vec::with_capacity(params.num_param_servers);
    let expected = params.num_fastgear + params.num_slowgear;
    for (i, server) in servers.iter().enumerate() {
        let listener = TcpListener::bind("127.0.0.1:0")?;
        ps_addrs.push(listener.local_addr()?);
        let server = Arc::clone(server);
        let log = log.clone();
        ps_handles.push(thread::spawn(move || run_ps_socket(server, i, listener, expected, log)));
    }

    let dense_specs = params.dense_specs(dataset);
    let mut sg_addrs = Vec::with_capacity(params.num_slowgear);
    let mut sg_handles = Vec::with_capacity(params.num_slowgear);
    for (i, shard) in slowgear_shards(dataset, params.num_slowgear).into_iter().enumerate() {
        let listener = TcpListener::bind("127.0.0.1:0")?;
        sg_addrs.push(listener.local_addr()?);
        let sg = Slowgear::new(
            i,
            params.run_id.clone(),
            dense_specs.clone(),
            params.ttl,
            params.m,
            clock.clone(),
        );
        sg.load_dense_inputs(shard);
        let (num_fg, ps_addrs, assignment, log) =
            (params.num_fastgear, ps_addrs.clone(), Arc::clone(&assignment), log.clone());
        sg_handles.push(thread::spawn(move || {
            run_slowgear_socket(sg, listener, num_fg, ps_addrs, assignment, log)
        }));
    }

    let sparse_specs = params.sparse_specs(dataset);
    let mut fg_handles = Vec::with_capacity(params.num_fastgear);
    for (i, shard) in fastgear_shards(dataset, params.num_fastgear).into_iter().enumerate() {
        let fg = Fastgear::new(
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
        );
        let (steps, max_inflight) = (params.steps, params.max_inflight);
        let (sg_addrs, ps_addrs, assignment, log, clock) = (
            sg_addrs.clone(),
            ps_addrs.clone(),
            Arc::clone(&assignment),
            log.clone(),
            clock.clone(),
        );
        fg_handles.push(thread::spawn(move || -> Result<Fastgear, TrainError> {
            let mut fg = fg;
            let mut net =
                SocketFgNet::connect_all(i, &sg_addrs, &ps_addrs, assignment, max_inflight, log)?;
            for _ in 0..steps {
                fg.run_one_scheduled_step(&mut net)?;
                clock.tick();
            }
            net.shutdown()?;
            Ok(fg)
        }));
    }

    let mut fgs = Vec::with_capacity(params.num_fastgear);
    for (i, h) in fg_handles.into_iter().enumerate() {
        fgs.push(join_worker(h, Endpoint::fastgear(i))?);
    }
    let mut sgs = Vec::with_capacity(params.num_slowgear);
    for (i, h) in sg_handles.into_iter().enumerate() {
        sgs.push(join_worker(h, Endpoint::slowgear(i))?);
    }
    for (i, h) in ps_handles.into_iter().enumerate() {
        join_worker(h, Endpoint::param_server(i))?;
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
    let final_params = collect_final_params(&servers, &assignment, &names)?;
    Ok(RunOutput {
        rows,
        final_params,
        totals,
        transcripts: log.map(|l| l.receiver_transcripts()),
    })
}
