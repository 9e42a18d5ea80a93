//! Slowgear-side key/value state: the TTL-bounded DFV cache, the dense
//! input table, and the per-image gradient accumulator.
//!
//! Freshness is exclusive: an entry written at time `t` with TTL `k` is
//! served while `now - t < k` and is a miss from `now == t + k` onwards,
//! so TTL 0 never serves a cached value. Expired entries are refreshed
//! lazily — a miss leaves the stale value in place until the next put or
//! an explicit [`KvStore::evict_expired`] sweep.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Instant;

use parking_lot::{Mutex, RwLock};

use crate::error::CoreError;

/// Identifier of one training image; also the sharding key.
pub type ImageId = u64;

/// Time source for cache freshness. The wall variant reports elapsed
/// milliseconds; the logical variant reports a shared tick counter that
/// the training loop advances explicitly, which makes runs replayable.
#[derive(Debug, Clone)]
pub enum Clock {
    Wall { start: Instant },
    Logical(Arc<AtomicU64>),
}

impl Clock {
    pub fn wall() -> Self {
        Clock::Wall { start: Instant::now() }
    }

    pub fn logical() -> Self {
        Clock::Logical(Arc::new(AtomicU64::new(0)))
    }

    pub fn now(&self) -> u64 {
        match self {
            Clock::Wall { start } => start.elapsed().as_millis() as u64,
            Clock::Logical(ticks) => ticks.load(Ordering::SeqCst),
        }
    }

    /// Advances a logical clock by one tick; no-op on a wall clock.
    pub fn tick(&self) {
        if let Clock::Logical(ticks) = self {
            ticks.fetch_add(1, Ordering::SeqCst);
        }
    }
}

#[derive(Debug, Clone)]
struct DfvEntry {
    values: Vec<f32>,
    created_at: u64,
}

/// Outcome of pushing one gradient batch into the accumulator.
#[derive(Debug, Clone, PartialEq)]
pub enum AccumResult {
    /// Batch stored; the image now has this many pending batches.
    Pending(usize),
    /// The target count was reached: all pending batches were drained and
    /// averaged into this gradient.
    Ready(Vec<f32>),
}

/// Running totals the store maintains about its own traffic.
#[derive(Debug, Default)]
pub struct StoreStats {
    hits: AtomicU64,
    misses: AtomicU64,
}

pub struct KvStore {
    ttl: u64,
    dense_inputs: RwLock<HashMap<ImageId, Vec<f32>>>,
    dfvs: RwLock<HashMap<ImageId, DfvEntry>>,
    accums: Mutex<HashMap<ImageId, Vec<Vec<f32>>>>,
    stats: StoreStats,
}

impl KvStore {
    pub fn new(ttl: u64) -> Self {
        Self {
            ttl,
            dense_inputs: RwLock::new(HashMap::new()),
            dfvs: RwLock::new(HashMap::new()),
            accums: Mutex::new(HashMap::new()),
            stats: StoreStats::default(),
        }
    }

    pub fn ttl(&self) -> u64 {
        self.ttl
    }

    pub fn insert_dense_input(&self, id: ImageId, values: Vec<f32>) {
        self.dense_inputs.write().insert(id, values);
    }

    pub fn dense_input(&self, id: ImageId) -> Option<Vec<f32>> {
        self.dense_inputs.read().get(&id).cloned()
    }

    pub fn dense_input_count(&self) -> usize {
        self.dense_inputs.read().len()
    }

    /// Looks up a fresh DFV. Counts a hit only when the entry exists and
    /// `now - created_at < ttl`; anything else is a miss.
    pub fn get_dfv(&self, id: ImageId, now: u64) -> Option<Vec<f32>> {
        let table = self.dfvs.read();
        match table.get(&id) {
            Some(entry) if now.saturating_sub(entry.created_at) < self.ttl => {
                self.stats.hits.fetch_add(1, Ordering::Relaxed);
                Some(entry.values.clone())
            }
            _ => {
                self.stats.misses.fetch_add(1, Ordering::Relaxed);
                None
            }
        }
    }

    pub fn put_dfv(&self, id: ImageId, values: Vec<f32>, now: u64) {
        self.dfvs.write().insert(id, DfvEntry { values, created_at: now });
    }

    /// Removes every entry whose age has reached the TTL. Returns how
    /// many were dropped.
    pub fn evict_expired(&self, now: u64) -> usize {
        let mut table = self.dfvs.write();
        let before = table.len();
        table.retain(|_, entry| now.saturating_sub(entry.created_at) < self.ttl);
        before - table.len()
    }

    pub fn dfv_count(&self) -> usize {
        self.dfvs.read().len()
    }

    /// Appends one DFV-gradient batch for `id`. When the pending count
    /// reaches `target`, all batches are drained and their mean (summed
    /// in f64, rounded once at the end) is returned.
    pub fn accum_push(
        &self,
        id: ImageId,
        grad: Vec<f32>,
        target: usize,
    ) -> Result<AccumResult, CoreError> {
        if target == 0 {
            return Err(CoreError::InvalidTensor { reason: "accumulation target of 0".into() });
        }
        let mut accums = self.accums.lock();
        let pending = accums.entry(id).or_default();
        if let Some(first) = pending.first() {
            if first.len() != grad.len() {
                return Err(CoreError::ShapeMismatch {
                    op: "accum_push",
                    left: vec![grad.len()],
                    right: vec![first.len()],
                });
            }
        }
        pending.push(grad);
        if pending.len() < target {
            return Ok(AccumResult::Pending(pending.len()));
        }
        let batches = accums.remove(&id).unwrap();
        let dim = batches[0].len();
        let mut sums = vec![0.0f64; dim];
        for batch in &batches {
            for (s, &g) in sums.iter_mut().zip(batch) {
                *s += g as f64;
            }
        }
        let n = batches.len() as f64;
        Ok(AccumResult::Ready(sums.into_iter().map(|s| (s / n) as f32).collect()))
    }

    /// Number of batches currently pending for `id`.
    pub fn accum_pending(&self, id: ImageId) -> usize {
        self.accums.lock().get(&id).map_or(0, Vec::len)
    }

    /// Discards every partially filled accumulator and returns how many
    /// gradient batches were dropped.
    pub fn drain_leftovers(&self) -> usize {
        let mut accums = self.accums.lock();
        let dropped = accums.values().map(Vec::len).sum();
        accums.clear();
        dropped
    }

    pub fn hits(&self) -> u64 {
        self.stats.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> u64 {
        self.stats.misses.load(Ordering::Relaxed)
    }
}
