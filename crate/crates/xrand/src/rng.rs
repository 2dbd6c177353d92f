//! Seeded randomness. Every stochastic operation in the crate takes an
//! explicit [`Rng`]; same seed, same byte stream, on every platform.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;

/// Deterministic random stream with a recorded seed.
///
/// Substreams are derived with [`Rng::derive`] so parallel work (per-sample,
/// per-model, per-sweep-point) reproduces the serial result exactly.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha12Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            inner: ChaCha12Rng::seed_from_u64(seed),
        }
    }

    /// Seed this stream was created from.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream keyed by `tag`. Derivation mixes the base
    /// seed and the tag through splitmix64, so `derive(a) != derive(b)`
    /// streams are uncorrelated for a != b.
    pub fn derive(&self, tag: u64) -> Rng {
        let mixed = splitmix64(self.seed ^ splitmix64(tag.wrapping_add(0x9e3779b97f4a7c15)));
        Rng::new(mixed)
    }

    /// Uniform draw in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        // 53 random mantissa bits.
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal via Box-Muller (no rejection, draw count is fixed).
    pub fn standard_normal(&mut self) -> f64 {
        let u1 = (self.uniform()).max(f64::MIN_POSITIVE);
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Standard Laplace (location 0, scale 1) via inverse CDF.
    pub fn standard_laplace(&mut self) -> f64 {
        let u = self.uniform() - 0.5;
        -u.signum() * (1.0 - 2.0 * u.abs()).max(f64::MIN_POSITIVE).ln()
    }

    /// Uniform integer in [0, bound). Uses Lemire-style rejection for
    /// platform-stable results.
    pub fn below(&mut self, bound: usize) -> usize {
        assert!(bound > 0, "bound must be positive");
        let bound = bound as u64;
        let threshold = bound.wrapping_neg() % bound;
        loop {
            let r = self.inner.next_u64();
            let hi = ((r as u128 * bound as u128) >> 64) as u64;
            let lo = (r as u128 * bound as u128) as u64;
            if lo >= threshold {
                return hi as usize;
            }
        }
    }

    /// Draw an index from an explicit discrete distribution. Probabilities
    /// need not be normalized; the last index absorbs rounding slack.
    pub fn discrete(&mut self, probs: &[f64]) -> usize {
        let total: f64 = probs.iter().sum();
        let mut u = self.uniform() * total;
        for (idx, p) in probs.iter().enumerate() {
            if u < *p {
                return idx;
            }
            u -= p;
        }
        probs.len() - 1
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

impl RngCore for Rng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }
    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }
    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.inner.fill_bytes(dest)
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = Rng::new(7);
        let mut b = Rng::new(7);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn derived_streams_differ() {
        let base = Rng::new(7);
        let mut a = base.derive(0);
        let mut b = base.derive(1);
        assert_ne!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn uniform_in_unit_interval() {
        let mut rng = Rng::new(3);
        for _ in 0..1000 {
            let u = rng.uniform();
            assert!((0.0..1.0).contains(&u));
        }
    }

    #[test]
    fn discrete_respects_mass() {
        let mut rng = Rng::new(11);
        let mut counts = [0usize; 3];
        for _ in 0..30_000 {
            counts[rng.discrete(&[0.2, 0.3, 0.5])] += 1;
        }
        assert!((counts[0] as f64 / 30_000.0 - 0.2).abs() < 0.02);
        assert!((counts[2] as f64 / 30_000.0 - 0.5).abs() < 0.02);
    }
}
