//! Deterministic random source.
//!
//! All randomness in the crate (parameter init, dropout masks, shuffling,
//! synthetic corpora) flows through [`SeedRng`], a thin wrapper over the
//! ChaCha20 stream cipher RNG. Draws are derived from raw `next_u64` output
//! with fixed arithmetic, so the same seed yields the same sequence on every
//! platform and is independent of `rand`'s distribution internals.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

pub struct SeedRng {
    inner: ChaCha20Rng,
}

impl SeedRng {
    pub fn new(seed: u64) -> Self {
        SeedRng {
            inner: ChaCha20Rng::seed_from_u64(seed),
        }
    }

    /// A child generator whose stream is decorrelated from this one by `tag`.
    pub fn derive(&mut self, tag: u64) -> Self {
        let base = self.inner.next_u64();
        SeedRng::new(base ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in [0, 1) with 53 bits of mantissa.
    pub fn unit(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.unit()
    }

    /// Standard normal via Box-Muller (one value per call).
    pub fn normal(&mut self) -> f64 {
        let u1 = self.unit().max(f64::MIN_POSITIVE);
        let u2 = self.unit();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Uniform integer in [0, n). Modulo bias is below 2^-50 for desk-scale n.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        (self.inner.next_u64() % n as u64) as usize
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, values: &mut [T]) {
        for i in (1..values.len()).rev() {
            let j = self.below(i + 1);
            values.swap(i, j);
        }
    }
}
