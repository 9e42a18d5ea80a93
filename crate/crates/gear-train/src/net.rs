//! Transport seam between workers. Two implementations exist: the
//! in-process one below (synchronous dispatch on one thread, the
//! deterministic default) and the TCP one in [`crate::socket`].
//!
//! Both move every message through the wire codec — the in-process path
//! encodes, logs, and decodes each frame rather than passing structs
//! around — so the two transports are byte-equivalent on the wire and a
//! run can be compared across them frame by frame.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use parking_lot::Mutex;

use gear_core::store::ImageId;
use gear_core::wire::{self, Endpoint, InferStatus, Message, PulledParam};
use gear_core::Tensor;

use crate::pserver::ParamServer;
use crate::slowgear::Slowgear;
use crate::TrainError;

/// Connection to the parameter-server tier. Names are routed to shards
/// internally; callers see one logical parameter space.
pub trait PsLink {
    fn pull(&mut self, names: &[String]) -> Result<Vec<PulledParam>, TrainError>;
    fn push_grad(&mut self, name: &str, grad: &Tensor) -> Result<(), TrainError>;
    /// Announces this worker is done to every server.
    fn shutdown(&mut self) -> Result<(), TrainError>;
}

/// A fastgear's view of the rest of the topology.
pub trait FgNet {
    /// Resolves a batch of (slowgear index, image id) inference requests,
    /// preserving request order. Transports may pipeline.
    fn infer_batch(
        &mut self,
        reqs: &[(usize, ImageId)],
    ) -> Result<Vec<(InferStatus, Vec<f32>)>, TrainError>;

    /// One-way DFV-gradient push to the owning slowgear.
    fn grad_push(&mut self, sg: usize, image_id: ImageId, grad: Vec<f32>) -> Result<(), TrainError>;

    fn ps(&mut self) -> &mut dyn PsLink;

    /// Announces this worker is done to every slowgear and server.
    fn shutdown(&mut self) -> Result<(), TrainError>;
}

/// Frame-level receive log. Each received frame is appended to its lane
/// (receiver, sender-or-connection). Two runs are transport-equivalent
/// when, for every receiver, the multisets of per-lane transcripts match:
/// lane *names* differ across transports (the socket side only knows
/// connections), so transcripts are compared unlabeled.
#[derive(Default)]
pub struct MessageLog {
    lanes: Mutex<BTreeMap<(String, String), Vec<Vec<u8>>>>,
}

impl MessageLog {
    pub fn record(&self, receiver: &str, lane: &str, frame: &[u8]) {
        self.lanes
            .lock()
            .entry((receiver.to_string(), lane.to_string()))
            .or_default()
            .push(frame.to_vec());
    }

    /// Per receiver: the sorted list of its lane transcripts.
    pub fn receiver_transcripts(&self) -> BTreeMap<String, Vec<Vec<Vec<u8>>>> {
        let mut out: BTreeMap<String, Vec<Vec<Vec<u8>>>> = BTreeMap::new();
        for ((receiver, _lane), frames) in self.lanes.lock().iter() {
            out.entry(receiver.clone()).or_default().push(frames.clone());
        }
        for transcripts in out.values_mut() {
            transcripts.sort();
        }
        out
    }

    pub fn total_frames(&self) -> usize {
        self.lanes.lock().values().map(Vec::len).sum()
    }
}

/// State shared by all in-process links: the server tier plus the
/// name-to-shard map and the optional frame log.
pub struct InprocShared {
    pub servers: Vec<Arc<ParamServer>>,
    pub assignment: HashMap<String, usize>,
    pub log: Option<Arc<MessageLog>>,
}

impl InprocShared {
    fn record(&self, receiver: &Endpoint, lane: &Endpoint, frame: &[u8]) {
        if let Some(log) = &self.log {
            log.record(&receiver.to_string(), &lane.to_string(), frame);
        }
    }

    /// Frames a message to one server, hands it over, and frames the
    /// reply back. The encode/decode on both legs is deliberate: the
    /// in-process transport exercises the same bytes as the socket one.
    fn ps_round_trip(
        &self,
        from: Endpoint,
        shard: usize,
        msg: &Message,
    ) -> Result<Option<Message>, TrainError> {
        let server_ep = Endpoint::param_server(shard);
        let frame = wire::encode(msg);
        self.record(&server_ep, &from, &frame);
        let reply = self.servers[shard].handle(&wire::decode(&frame)?)?;
        match reply {
            Some(reply) => {
                let frame = wire::encode(&reply);
                self.record(&from, &server_ep, &frame);
                Ok(Some(wire::decode(&frame)?))
            }
            None => Ok(None),
        }
    }
}

/// Shard-grouped parameter pull, shared by both transports: names are
/// batched per shard (one request each), responses merged, and the
/// result reassembled in the requested order.
pub(crate) fn grouped_pull(
    names: &[String],
    assignment: &HashMap<String, usize>,
    mut round_trip: impl FnMut(usize, Message) -> Result<Message, TrainError>,
) -> Result<Vec<PulledParam>, TrainError> {
    let mut by_shard: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for name in names {
        let shard = *assignment
            .get(name)
            .ok_or_else(|| TrainError::UnknownParam { name: name.clone() })?;
        by_shard.entry(shard).or_default().push(name.clone());
    }
    let mut by_name: HashMap<String, PulledParam> = HashMap::new();
    for (shard, shard_names) in by_shard {
        match round_trip(shard, Message::ParamPullReq { names: shard_names })? {
            Message::ParamPullResp { params } => {
                for p in params {
                    by_name.insert(p.name.clone(), p);
                }
            }
            other => {
                return Err(TrainError::Protocol(format!("expected pull response, got {other:?}")))
            }
        }
    }
    names
        .iter()
        .map(|n| by_name.remove(n).ok_or_else(|| TrainError::UnknownParam { name: n.clone() }))
        .collect()
}

/// In-process parameter-server link for one worker.
pub struct InprocPsLink<'a> {
    pub shared: &'a InprocShared,
    pub from: Endpoint,
}

impl PsLink for InprocPsLink<'_> {
    fn pull(&mut self, names: &[String]) -> Result<Vec<PulledParam>, TrainError> {
        let (shared, from) = (self.shared, self.from);
        grouped_pull(names, &shared.assignment, |shard, req| {
            shared
                .ps_round_trip(from, shard, &req)?
                .ok_or_else(|| TrainError::Protocol("pull request got no reply".into()))
        })
    }

    fn push_grad(&mut self, name: &str, grad: &Tensor) -> Result<(), TrainError> {
        let shard = *self
            .shared
            .assignment
            .get(name)
            .ok_or_else(|| TrainError::UnknownParam { name: name.to_string() })?;
        let msg = Message::ParamGradPush { name: name.to_string(), grad: grad.clone() };
        self.shared.ps_round_trip(self.from, shard, &msg)?;
        Ok(())
    }

    fn shutdown(&mut self) -> Result<(), TrainError> {
        for shard in 0..self.shared.servers.len() {
            self.shared.ps_round_trip(self.from, shard, &Message::Shutdown)?;
        }
        Ok(())
    }
}

/// The fastgear's in-process network: direct synchronous dispatch into
/// the slowgears and servers, single-threaded, hence fully deterministic.
pub struct InprocNet<'a> {
    from: Endpoint,
    slowgears: &'a mut [Slowgear],
    shared: &'a InprocShared,
    ps_link: InprocPsLink<'a>,
}

impl<'a> InprocNet<'a> {
    pub fn new(fg_index: usize, slowgears: &'a mut [Slowgear], shared: &'a InprocShared) -> Self {
        let from = Endpoint::fastgear(fg_index);
        Self { from, slowgears, shared, ps_link: InprocPsLink { shared, from } }
    }

    fn dispatch_to_sg(&mut self, sg: usize, msg: &Message) -> Result<Option<Message>, TrainError> {
        let sg_ep = Endpoint::slowgear(sg);
        let frame = wire::encode(msg);
        self.shared.record(&sg_ep, &self.from, &frame);
        let mut ps = InprocPsLink { shared: self.shared, from: sg_ep };
        let reply = self.slowgears[sg].handle_message(&wire::decode(&frame)?, &mut ps)?;
        match reply {
            Some(reply) => {
                let frame = wire::encode(&reply);
                self.shared.record(&self.from, &sg_ep, &frame);
                Ok(Some(wire::decode(&frame)?))
            }
            None => Ok(None),
        }
    }
}

impl FgNet for InprocNet<'_> {
    fn infer_batch(
        &mut self,
        reqs: &[(usize, ImageId)],
    ) -> Result<Vec<(InferStatus, Vec<f32>)>, TrainError> {
        let mut out = Vec::with_capacity(reqs.len());
        for &(sg, image_id) in reqs {
            let reply = self
                .dispatch_to_sg(sg, &Message::InferReq { image_id })?
                .ok_or_else(|| TrainError::Protocol("inference request got no reply".into()))?;
            match reply {
                Message::InferResp { image_id: got, status, dfv } if got == image_id => {
                    out.push((status, dfv));
                }
                other => {
                    return Err(TrainError::Protocol(format!(
                        "expected inference response for {image_id}, got {other:?}"
                    )))
                }
            }
        }
        Ok(out)
    }

    fn grad_push(&mut self, sg: usize, image_id: ImageId, grad: Vec<f32>) -> Result<(), TrainError> {
        match self.dispatch_to_sg(sg, &Message::GradPush { image_id, dfv_grad: grad })? {
            None => Ok(()),
            Some(other) => {
                Err(TrainError::Protocol(format!("gradient push got unexpected reply {other:?}")))
            }
        }
    }

    fn ps(&mut self) -> &mut dyn PsLink {
        &mut self.ps_link
    }

    fn shutdown(&mut self) -> Result<(), TrainError> {
        for sg in 0..self.slowgears.len() {
            self.dispatch_to_sg(sg, &Message::Shutdown)?;
        }
        self.ps_link.shutdown()
    }
}
