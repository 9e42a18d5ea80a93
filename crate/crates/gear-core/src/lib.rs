//! Core numerics and domain types for gear training: tensors and kernels,
//! the split dense/sparse model with both gradient routes, Adam, the
//! TTL-bounded DFV store, the wire protocol, and data loading.
//!
//! Everything here is deterministic for a fixed seed. With the default
//! `parallel` feature the heavy kernels fan out over a thread pool in a
//! way that is bitwise identical to the sequential fallback (only
//! independent output slots are parallelized; no floating-point reduction
//! order ever changes), so results do not depend on the feature choice.

pub mod data;
pub mod error;
pub mod model;
pub mod optim;
pub mod rng;
pub mod store;
pub mod tensor;
pub mod wire;

pub use error::CoreError;
pub use tensor::Tensor;
