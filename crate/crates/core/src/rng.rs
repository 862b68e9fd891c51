//! Portable seeded randomness.
//!
//! Every stream is a xoshiro256++ generator whose state is expanded from a
//! 64-bit seed with SplitMix64. Sub-streams (per speaker, per epoch, per
//! module) derive their seed from a parent seed and integer tags, so no two
//! consumers share a stream and nothing depends on call order elsewhere.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_xoshiro::{SplitMix64, Xoshiro256PlusPlus};

/// Mixes `tags` into `base` to produce an independent seed.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mut s = base;
    for &t in tags {
        let mut sm = SplitMix64::seed_from_u64(s ^ t.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        s = sm.next_u64();
    }
    s
}

#[derive(Clone, Debug)]
pub struct Rng(Xoshiro256PlusPlus);

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self(Xoshiro256PlusPlus::seed_from_u64(seed))
    }

    pub fn derived(base: u64, tags: &[u64]) -> Self {
        Self::new(derive_seed(base, tags))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        self.0.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.0.random_range(0..n)
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(core::f64::consts::TAU * u2)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: alloc::vec::Vec<u64> = {
            let mut r = Rng::derived(7, &[1, 2]);
            (0..4).map(|_| r.next_u64()).collect()
        };
        let b: alloc::vec::Vec<u64> = {
            let mut r = Rng::derived(7, &[1, 2]);
            (0..4).map(|_| r.next_u64()).collect()
        };
        let c: alloc::vec::Vec<u64> = {
            let mut r = Rng::derived(7, &[2, 1]);
            (0..4).map(|_| r.next_u64()).collect()
        };
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn normal_moments_are_sane() {
        let mut r = Rng::new(3);
        let xs: alloc::vec::Vec<f64> = (0..20_000).map(|_| r.normal()).collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / xs.len() as f64;
        assert!(mean.abs() < 0.03, "{mean}");
        assert!((var - 1.0).abs() < 0.05, "{var}");
    }
}
