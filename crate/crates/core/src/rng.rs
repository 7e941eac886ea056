//! Seeded randomness with reproducible, independently derivable streams.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

/// Deterministic pseudo-random source.
///
/// The same seed and call sequence always produce the same draws. Independent
/// streams for data-loading workers or per-sample augmentation come from
/// [`RandomSource::derive`], which never overlaps with the parent stream.
#[derive(Debug, Clone)]
pub struct RandomSource {
    inner: ChaCha20Rng,
}

impl RandomSource {
    pub fn from_seed(seed: u64) -> Self {
        RandomSource {
            inner: ChaCha20Rng::seed_from_u64(seed),
        }
    }

    /// Derive an independent stream from this source's seed material.
    ///
    /// Derivation depends only on the original seed and `stream`, not on how
    /// many draws have been consumed, so workers can derive concurrently.
    pub fn derive(&self, stream: u64) -> Self {
        let mut child = self.inner.clone();
        child.set_stream(stream);
        child.set_word_pos(0);
        RandomSource { inner: child }
    }

    /// Uniform draw in `[lo, hi)`; returns `lo` when the range is empty.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        if hi <= lo {
            return lo;
        }
        self.inner.gen_range(lo..hi)
    }

    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        Normal::new(mean, std)
            .expect("std must be finite and non-negative")
            .sample(&mut self.inner)
    }

    /// Bernoulli draw: true with probability `p`.
    pub fn coin(&mut self, p: f64) -> bool {
        if p <= 0.0 {
            // Still consume one draw so the call sequence stays aligned.
            let _ = self.inner.gen::<f64>();
            return false;
        }
        self.inner.gen::<f64>() < p
    }

    pub fn uniform_usize(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.inner.gen_range(0..=i);
            items.swap(i, j);
        }
    }

    /// Random sign, +1.0 or -1.0.
    pub fn sign(&mut self) -> f64 {
        if self.inner.gen::<bool>() {
            1.0
        } else {
            -1.0
        }
    }
}
