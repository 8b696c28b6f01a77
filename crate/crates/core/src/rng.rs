//! Seeded randomness.
//!
//! Every random draw in the toolkit goes through [`Rng`], a thin wrapper over
//! SplitMix64 with a fixed set of derived samplers, so any implementation that
//! follows the same recipe reproduces the same corpora:
//!
//! * `uniform()` is `(next_u64 >> 11) * 2^-53`, a value in `[0, 1)`.
//! * `categorical(p)` is inverse-CDF sampling with a single uniform draw.
//! * `dirichlet_ones(n)` normalizes `n` draws of `-ln(1 - u)`.
//! * Independent streams come from [`Rng::stream`], which mixes the base seed,
//!   an FNV-1a hash of a label and an index through the SplitMix64 finalizer.

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::SplitMix64;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// SplitMix64 output finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(label: &str) -> u64 {
    label
        .bytes()
        .fold(FNV_OFFSET, |h, b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

#[derive(Debug, Clone)]
pub struct Rng {
    inner: SplitMix64,
}

impl Rng {
    pub fn seed_from_u64(seed: u64) -> Self {
        Rng {
            inner: SplitMix64::seed_from_u64(seed),
        }
    }

    /// Independent stream for `(seed, label, index)`.
    pub fn stream(seed: u64, label: &str, index: u64) -> Self {
        let key = mix64(fnv1a(label) ^ mix64(index.wrapping_add(0x9e37_79b9_7f4a_7c15)));
        Rng::seed_from_u64(mix64(seed ^ key))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "empty range");
        ((self.uniform() * n as f64) as usize).min(n - 1)
    }

    /// Draws an index with probability proportional to `probs`.
    ///
    /// Rows are expected to be normalized; a uniform draw that lands past the
    /// accumulated mass through rounding falls back to the last positive entry.
    pub fn categorical(&mut self, probs: &[f64]) -> usize {
        let u = self.uniform();
        let mut acc = 0.0;
        for (i, &p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        probs
            .iter()
            .rposition(|&p| p > 0.0)
            .expect("categorical over an all-zero row")
    }

    pub fn exp1(&mut self) -> f64 {
        -(1.0 - self.uniform()).ln()
    }

    /// Symmetric Dirichlet(1, ..., 1) draw of length `n`.
    pub fn dirichlet_ones(&mut self, n: usize) -> Vec<f64> {
        let draws: Vec<f64> = (0..n).map(|_| self.exp1()).collect();
        let total: f64 = draws.iter().sum();
        draws.into_iter().map(|d| d / total).collect()
    }
}
