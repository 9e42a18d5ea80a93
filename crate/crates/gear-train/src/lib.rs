//! The gear-training runtime: fastgear and slowgear workers, parameter
//! servers, the two transports (deterministic in-process and TCP), and
//! the run engines that wire a topology together.
//!
//! Training follows a six-step cycle per batch. The fastgear asks each
//! sample's owning slowgear for the image's dense feature vector (DFV),
//! which the slowgear serves from a TTL cache or recomputes with current
//! dense parameters. The fastgear trains the sparse half on (sparse
//! features ++ DFV), pushes the sparse gradients to the parameter
//! servers, and sends each sample's loss-to-DFV gradient back to the
//! owning slowgear. The slowgear accumulates those per image; every M-th
//! one it averages them, backpropagates through the dense half with
//! current parameters, and pushes the dense gradients to the parameter
//! servers, which apply Adam server-side.

pub mod engine;
pub mod fastgear;
pub mod metrics;
pub mod net;
pub mod pserver;
pub mod slowgear;
pub mod socket;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Core(#[from] gear_core::CoreError),
    #[error(transparent)]
    Wire(#[from] gear_core::wire::WireError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("parameter {name:?} is not registered")]
    UnknownParam { name: String },
    #[error("parameter {name:?} is already registered")]
    DuplicateParam { name: String },
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("{endpoint} disconnected")]
    Disconnected { endpoint: String },
    #[error("{worker} failed: {reason}")]
    WorkerFailed { worker: String, reason: String },
    /// Mid-run failure with the metrics rows gathered up to that point,
    /// so callers can flush partial results before reporting the error.
    #[error("{worker} aborted the run: {reason}")]
    Aborted { worker: String, reason: String, rows: Vec<metrics::MetricsRow> },
    #[error("metrics csv line {line}: {reason}")]
    Csv { line: usize, reason: String },
}
