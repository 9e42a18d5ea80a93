//! Binary message protocol between fastgear workers, slowgear workers and
//! parameter servers, plus the image-to-slowgear routing hash.
//!
//! Every message travels as one frame:
//!
//! ```text
//! [u32 total frame length, little-endian, including this prefix]
//! [u8 kind]
//! [payload, kind-specific]
//! ```
//!
//! All integers are little-endian; real vectors are a u32 element count
//! followed by IEEE-754 32-bit values; strings are a u32 byte length
//! followed by UTF-8; tensors are a u32 rank, the dims as u32s, then the
//! values as a vector. The full payload layout per kind is documented in
//! `docs/wire.md` and pinned by the tests below — the encoding is part of
//! the system contract, not an implementation detail.

use std::fmt;
use std::io::{self, Read, Write};

use thiserror::Error;

use crate::store::ImageId;
use crate::tensor::Tensor;

pub const KIND_INFER_REQ: u8 = 1;
pub const KIND_INFER_RESP: u8 = 2;
pub const KIND_GRAD_PUSH: u8 = 3;
pub const KIND_PARAM_PULL_REQ: u8 = 4;
pub const KIND_PARAM_PULL_RESP: u8 = 5;
pub const KIND_PARAM_GRAD_PUSH: u8 = 6;
pub const KIND_SHUTDOWN: u8 = 7;

/// Upper bound on a single frame; anything larger is treated as a
/// corrupted length prefix rather than an allocation request.
pub const MAX_FRAME_LEN: u32 = 256 * 1024 * 1024;

#[derive(Debug, Error)]
pub enum WireError {
    #[error("frame truncated while reading {context}")]
    Truncated { context: &'static str },
    #[error("frame length {declared} does not match buffer length {actual}")]
    LengthMismatch { declared: u32, actual: usize },
    #[error("{extra} trailing bytes after payload")]
    TrailingBytes { extra: usize },
    #[error("unknown message kind {0}")]
    UnknownKind(u8),
    #[error("unknown inference status {0}")]
    UnknownStatus(u8),
    #[error("frame length {len} exceeds limit {MAX_FRAME_LEN}")]
    FrameTooLarge { len: u32 },
    #[error("malformed frame: {0}")]
    Malformed(String),
    #[error("invalid utf-8 in string field")]
    BadUtf8(#[from] std::string::FromUtf8Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Result of an inference request, carried in INFER_RESP.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InferStatus {
    Ok,
    UnknownImage,
}

impl InferStatus {
    fn to_byte(self) -> u8 {
        match self {
            InferStatus::Ok => 0,
            InferStatus::UnknownImage => 1,
        }
    }

    fn from_byte(b: u8) -> Result<Self, WireError> {
        match b {
            0 => Ok(InferStatus::Ok),
            1 => Ok(InferStatus::UnknownImage),
            other => Err(WireError::UnknownStatus(other)),
        }
    }
}

/// One named parameter tensor with its server-side version, as carried in
/// PARAM_PULL_RESP.
#[derive(Debug, Clone, PartialEq)]
pub struct PulledParam {
    pub name: String,
    pub version: u64,
    pub tensor: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    /// Step 1: a fastgear asks the owning slowgear for an image's DFV.
    InferReq { image_id: ImageId },
    /// Step 3: the slowgear's answer. `dfv` is empty unless status is Ok.
    InferResp { image_id: ImageId, status: InferStatus, dfv: Vec<f32> },
    /// Step 5: per-sample loss gradient w.r.t. the DFV, sent to the
    /// owning slowgear.
    GradPush { image_id: ImageId, dfv_grad: Vec<f32> },
    /// Worker asks a parameter server for current tensors by name.
    ParamPullReq { names: Vec<String> },
    ParamPullResp { params: Vec<PulledParam> },
    /// Steps 4/6: a raw gradient for one named tensor; the server applies
    /// the optimizer.
    ParamGradPush { name: String, grad: Tensor },
    Shutdown,
}

impl Message {
    pub fn kind(&self) -> u8 {
        match self {
            Message::InferReq { .. } => KIND_INFER_REQ,
            Message::InferResp { .. } => KIND_INFER_RESP,
            Message::GradPush { .. } => KIND_GRAD_PUSH,
            Message::ParamPullReq { .. } => KIND_PARAM_PULL_REQ,
            Message::ParamPullResp { .. } => KIND_PARAM_PULL_RESP,
            Message::ParamGradPush { .. } => KIND_PARAM_GRAD_PUSH,
            Message::Shutdown => KIND_SHUTDOWN,
        }
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_vec(out: &mut Vec<u8>, v: &[f32]) {
    put_u32(out, v.len() as u32);
    for &x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn put_string(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor) {
    put_u32(out, t.shape().len() as u32);
    for &d in t.shape() {
        put_u32(out, d as u32);
    }
    put_vec(out, t.data());
}

/// Encodes a message into one complete frame, length prefix included.
pub fn encode(msg: &Message) -> Vec<u8> {
    let mut out = vec![0u8; 4];
    out.push(msg.kind());
    match msg {
        Message::InferReq { image_id } => put_u64(&mut out, *image_id),
        Message::InferResp { image_id, status, dfv } => {
            put_u64(&mut out, *image_id);
            out.push(status.to_byte());
            put_vec(&mut out, dfv);
        }
        Message::GradPush { image_id, dfv_grad } => {
            put_u64(&mut out, *image_id);
            put_vec(&mut out, dfv_grad);
        }
        Message::ParamPullReq { names } => {
            put_u32(&mut out, names.len() as u32);
            for name in names {
                put_string(&mut out, name);
            }
        }
        Message::ParamPullResp { params } => {
            put_u32(&mut out, params.len() as u32);
            for p in params {
                put_string(&mut out, &p.name);
                put_u64(&mut out, p.version);
                put_tensor(&mut out, &p.tensor);
            }
        }
        Message::ParamGradPush { name, grad } => {
            put_string(&mut out, name);
            put_tensor(&mut out, grad);
        }
        Message::Shutdown => {}
    }
    let len = out.len() as u32;
    out[..4].copy_from_slice(&len.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, context: &'static str) -> Result<&'a [u8], WireError> {
        if self.buf.len() - self.pos < n {
            return Err(WireError::Truncated { context });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, context: &'static str) -> Result<u8, WireError> {
        Ok(self.take(1, context)?[0])
    }

    fn u32(&mut self, context: &'static str) -> Result<u32, WireError> {
        Ok(u32::from_le_bytes(self.take(4, context)?.try_into().unwrap()))
    }

    fn u64(&mut self, context: &'static str) -> Result<u64, WireError> {
        Ok(u64::from_le_bytes(self.take(8, context)?.try_into().unwrap()))
    }

    /// Reads an element count and rejects it up front if even
    /// minimum-sized elements could not fit in the remaining bytes, so a
    /// corrupt count fails cleanly instead of driving a huge allocation.
    fn count(&mut self, min_item_len: usize, context: &'static str) -> Result<usize, WireError> {
        let count = self.u32(context)? as usize;
        if count.saturating_mul(min_item_len) > self.buf.len() - self.pos {
            return Err(WireError::Truncated { context });
        }
        Ok(count)
    }

    fn vec(&mut self, context: &'static str) -> Result<Vec<f32>, WireError> {
        let count = self.count(4, context)?;
        let bytes = self.take(count * 4, context)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn string(&mut self, context: &'static str) -> Result<String, WireError> {
        let len = self.u32(context)? as usize;
        Ok(String::from_utf8(self.take(len, context)?.to_vec())?)
    }

    fn tensor(&mut self, context: &'static str) -> Result<Tensor, WireError> {
        let rank = self.count(4, context)?;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(self.u32(context)? as usize);
        }
        let values = self.vec(context)?;
        Tensor::new(dims, values).map_err(|e| WireError::Malformed(e.to_string()))
    }
}

/// Decodes one complete frame. The buffer must contain exactly one frame:
/// a declared length that disagrees with the buffer, leftover bytes after
/// the payload, or a payload that ends early are all errors.
pub fn decode(frame: &[u8]) -> Result<Message, WireError> {
    let mut r = Reader { buf: frame, pos: 0 };
    let declared = r.u32("length prefix")?;
    if declared as usize != frame.len() {
        return Err(WireError::LengthMismatch { declared, actual: frame.len() });
    }
    let kind = r.u8("kind tag")?;
    let msg = match kind {
        KIND_INFER_REQ => Message::InferReq { image_id: r.u64("image_id")? },
        KIND_INFER_RESP => Message::InferResp {
            image_id: r.u64("image_id")?,
            status: InferStatus::from_byte(r.u8("status")?)?,
            dfv: r.vec("dfv")?,
        },
        KIND_GRAD_PUSH => {
            Message::GradPush { image_id: r.u64("image_id")?, dfv_grad: r.vec("dfv_grad")? }
        }
        KIND_PARAM_PULL_REQ => {
            let count = r.count(4, "name count")?;
            let mut names = Vec::with_capacity(count);
            for _ in 0..count {
                names.push(r.string("name")?);
            }
            Message::ParamPullReq { names }
        }
        KIND_PARAM_PULL_RESP => {
            // Minimum per param: name len + version + rank + vec count.
            let count = r.count(4 + 8 + 4 + 4, "param count")?;
            let mut params = Vec::with_capacity(count);
            for _ in 0..count {
                params.push(PulledParam {
                    name: r.string("param name")?,
                    version: r.u64("param version")?,
                    tensor: r.tensor("param tensor")?,
                });
            }
            Message::ParamPullResp { params }
        }
        KIND_PARAM_GRAD_PUSH => {
            Message::ParamGradPush { name: r.string("grad name")?, grad: r.tensor("grad tensor")? }
        }
        KIND_SHUTDOWN => Message::Shutdown,
        other => return Err(WireError::UnknownKind(other)),
    };
    if r.pos != frame.len() {
        return Err(WireError::TrailingBytes { extra: frame.len() - r.pos });
    }
    Ok(msg)
}

/// Reads one full frame (length prefix included) from a byte stream.
/// Returns `Ok(None)` on clean end-of-stream at a frame boundary.
pub fn read_frame<R: Read>(reader: &mut R) -> Result<Option<Vec<u8>>, WireError> {
    let mut prefix = [0u8; 4];
    let mut filled = 0;
    while filled < 4 {
        match reader.read(&mut prefix[filled..])? {
            0 if filled == 0 => return Ok(None),
            0 => return Err(WireError::Truncated { context: "length prefix" }),
            n => filled += n,
        }
    }
    let len = u32::from_le_bytes(prefix);
    if len > MAX_FRAME_LEN {
        return Err(WireError::FrameTooLarge { len });
    }
    if (len as usize) < 5 {
        return Err(WireError::LengthMismatch { declared: len, actual: len as usize });
    }
    let mut frame = vec![0u8; len as usize];
    frame[..4].copy_from_slice(&prefix);
    reader.read_exact(&mut frame[4..]).map_err(|e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            WireError::Truncated { context: "frame body" }
        } else {
            WireError::Io(e)
        }
    })?;
    Ok(Some(frame))
}

pub fn write_frame<W: Write>(writer: &mut W, msg: &Message) -> Result<(), WireError> {
    writer.write_all(&encode(msg))?;
    Ok(())
}

/// Serializes a parameter set for on-disk snapshots: a u32 tensor count,
/// each tensor in wire encoding (registration order), then a name index
/// of (string name, u64 version) pairs in the same order.
pub fn encode_snapshot(params: &[PulledParam]) -> Vec<u8> {
    let mut out = Vec::new();
    put_u32(&mut out, params.len() as u32);
    for p in params {
        put_tensor(&mut out, &p.tensor);
    }
    for p in params {
        put_string(&mut out, &p.name);
        put_u64(&mut out, p.version);
    }
    out
}

pub fn decode_snapshot(bytes: &[u8]) -> Result<Vec<PulledParam>, WireError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let count = r.count(4 + 4 + 8 + 4, "snapshot count")?;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        tensors.push(r.tensor("snapshot tensor")?);
    }
    let mut params = Vec::with_capacity(count);
    for tensor in tensors {
        params.push(PulledParam {
            name: r.string("snapshot name")?,
            version: r.u64("snapshot version")?,
            tensor,
        });
    }
    if r.pos != bytes.len() {
        return Err(WireError::TrailingBytes { extra: bytes.len() - r.pos });
    }
    Ok(params)
}

/// The 64-bit finalizer mix used for image routing (the MurmurHash3
/// `fmix64` avalanche step; full derivation in `docs/wire.md`).
pub fn fmix64(mut x: u64) -> u64 {
    x ^= x >> 33;
    x = x.wrapping_mul(0xff51_afd7_ed55_8ccd);
    x ^= x >> 33;
    x = x.wrapping_mul(0xc4ce_b9fe_1a85_ec53);
    x ^= x >> 33;
    x
}

/// Deterministic owner of an image: every message about `id` goes to
/// slowgear `fmix64(id) mod num_slowgear`.
pub fn route_image(id: ImageId, num_slowgear: usize) -> usize {
    assert!(num_slowgear >= 1, "route_image requires at least one slowgear");
    (fmix64(id) % num_slowgear as u64) as usize
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Role {
    Fastgear,
    Slowgear,
    ParamServer,
}

/// One addressable worker in a run; (role, index) is unique.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Endpoint {
    pub role: Role,
    pub index: usize,
}

impl Endpoint {
    pub fn fastgear(index: usize) -> Self {
        Self { role: Role::Fastgear, index }
    }

    pub fn slowgear(index: usize) -> Self {
        Self { role: Role::Slowgear, index }
    }

    pub fn param_server(index: usize) -> Self {
        Self { role: Role::ParamServer, index }
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let role = match self.role {
            Role::Fastgear => "fastgear",
            Role::Slowgear => "slowgear",
            Role::ParamServer => "param-server",
        };
        write!(f, "{role}-{}", self.index)
    }
}
