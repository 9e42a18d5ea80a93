//! The run-reproducibility PRNG.
//!
//! Everything random in this workspace (parameter init, data shuffles,
//! synthetic data) flows through this one small generator so runs are
//! reproducible from a single u64 seed, independent of external crate
//! versions. The exact algorithms are also written out in docs/prng.md so
//! another implementation can reproduce the streams bit for bit.
//!
//! * State init: one round of SplitMix64 over the seed (so seed 0 is fine).
//! * Stream: xorshift64* (shift triple 12/25/27, multiplier
//!   0x2545_F491_4F6C_DD1D).
//! * Uniform f64 in [0,1): top 53 bits of the output scaled by 2^-53.
//! * Normal: Box-Muller on (u1, u2] with u1 forced into (0,1]; both
//!   generated values are consumed (cos first, sin cached for the next
//!   call).

#[derive(Debug, Clone)]
pub struct Rng {
    state: u64,
    cached_normal: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        // SplitMix64 finalization of the seed; guarantees a nonzero state.
        let mut z = seed.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
        Self { state: if z == 0 { 0x9E37_79B9_7F4A_7C15 } else { z }, cached_normal: None }
    }

    pub fn next_u64(&mut self) -> u64 {
        let mut x = self.state;
        x ^= x >> 12;
        x ^= x << 25;
        x ^= x >> 27;
        self.state = x;
        x.wrapping_mul(0x2545_F491_4F6C_DD1D)
    }

    /// Uniform in [0, 1).
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n). `n` must be positive. Uses the modulo
    /// reduction documented in docs/prng.md; the bias is below 2^-50 for
    /// every n used in this workspace.
    pub fn next_index(&mut self, n: usize) -> usize {
        assert!(n > 0, "next_index needs n > 0");
        (self.next_u64() % n as u64) as usize
    }

    /// Standard normal via Box-Muller. Draws two uniforms per pair of
    /// samples; the second sample is cached.
    pub fn next_normal(&mut self) -> f64 {
        if let Some(z) = self.cached_normal.take() {
            return z;
        }
        // u1 in (0,1] so the log is finite.
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.cached_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Fisher-Yates, iterating from the back.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.next_index(i + 1);
            xs.swap(i, j);
        }
    }

    /// Derives an independent child seed; used to give each worker and
    /// each model part its own stream from one run seed.
    pub fn derive(&mut self) -> u64 {
        self.next_u64()
    }
}
