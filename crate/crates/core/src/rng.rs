//! Deterministic random streams.
//!
//! Every random draw in the crate comes from an [`Rng`] backed by
//! xoshiro256++. A run has a single `seed`; independent consumers (weight
//! init, dropout, shuffling, data generation) each get their own stream via
//! [`Rng::stream`], which feeds `seed ^ splitmix64(stream_id)` through the
//! SplitMix64 seeding routine of `rand_xoshiro`. Streams never share state, so
//! adding a draw in one consumer cannot perturb another.

use rand::seq::SliceRandom;
use rand::{Rng as _, RngCore, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use rand_xoshiro::Xoshiro256PlusPlus;

/// Well-known stream ids.
pub mod streams {
    pub const INIT: u64 = 1;
    pub const DROPOUT: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const SPLIT: u64 = 4;
    pub const SYNTH: u64 = 5;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: Xoshiro256PlusPlus,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: Xoshiro256PlusPlus::seed_from_u64(seed),
        }
    }

    /// Independent stream `stream_id` of the run seeded with `seed`.
    pub fn stream(seed: u64, stream_id: u64) -> Self {
        Self::new(seed ^ splitmix64(stream_id))
    }

    /// Sub-stream keyed by two ids, e.g. (SHUFFLE, epoch).
    pub fn substream(seed: u64, stream_id: u64, sub: u64) -> Self {
        Self::new(seed ^ splitmix64(stream_id) ^ splitmix64(sub.wrapping_add(0x5851_F42D_4C95_7F2D)))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        let z: f64 = StandardNormal.sample(&mut self.inner);
        mean + std * z
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }
}
