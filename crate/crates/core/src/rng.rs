//! Counter-based random streams.
//!
//! Every consumer draws from its own ChaCha8 stream keyed by `(seed, stream)`,
//! so values never depend on the order in which unrelated consumers ran. The
//! float and shuffle conversions are written out here instead of using `rand`
//! distributions, whose outputs are not guaranteed stable across versions.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

/// Stream ids used across the crate.
pub mod streams {
    pub const INIT_BASE: u64 = 0x100;
    pub const SHUFFLE_BASE: u64 = 0x1_0000_0000;
    pub const PHI_BASE: u64 = 0x2_0000_0000;
    pub const PHI_NOISE: u64 = 0x3_0000_0000;
}

#[derive(Debug, Clone)]
pub struct Stream(ChaCha8Rng);

impl Stream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Stream(rng)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in `[0, n)`, `n > 0`, by rejection.
    pub fn below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return v % n;
            }
        }
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }

    /// `count` distinct indices from `0..n` (all of them, shuffled, when `count >= n`).
    pub fn sample_indices(&mut self, n: usize, count: usize) -> alloc::vec::Vec<usize> {
        let mut idx: alloc::vec::Vec<usize> = (0..n).collect();
        let take = count.min(n);
        for i in 0..take {
            let j = i + self.below((n - i) as u64) as usize;
            idx.swap(i, j);
        }
        idx.truncate(take);
        idx
    }
}
