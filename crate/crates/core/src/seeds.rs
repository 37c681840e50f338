//! Named, reproducible RNG streams derived from a single master seed.
//!
//! Every source of randomness in a run (weight init, data synthesis,
//! partitioning, per-round batching, warmup masks) draws from its own
//! stream, so changing one experiment axis (e.g. the pruning criterion)
//! never perturbs the random draws of another.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stable 64-bit FNV-1a over a byte string; keys the purpose tag.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// splitmix64 finalizer; decorrelates nearby inputs.
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Factory for deterministic sub-seeds, keyed by purpose and indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedStreams {
    master: u64,
}

impl SeedStreams {
    pub fn new(master: u64) -> Self {
        SeedStreams { master }
    }

    pub fn master(&self) -> u64 {
        self.master
    }

    fn derive(&self, purpose: &str, a: u64, b: u64) -> u64 {
        let mut h = splitmix64(self.master ^ fnv1a(purpose.as_bytes()));
        h = splitmix64(h ^ a.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        splitmix64(h ^ b.wrapping_mul(0xbf58_476d_1ce4_e5b9))
    }

    /// Weight initialization.
    pub fn init(&self) -> u64 {
        self.derive("init", 0, 0)
    }

    /// Synthetic dataset generation.
    pub fn synth(&self) -> u64 {
        self.derive("synth", 0, 0)
    }

    /// Train/test holdout split.
    pub fn holdout(&self) -> u64 {
        self.derive("holdout", 0, 0)
    }

    /// Non-IID partitioning.
    pub fn partition(&self) -> u64 {
        self.derive("partition", 0, 0)
    }

    /// Mini-batch order for one client in one round.
    pub fn batches(&self, client: usize, round: usize) -> u64 {
        self.derive("batches", client as u64, round as u64)
    }

    /// Random (warmup) mask draw for one client in one round.
    pub fn warmup_mask(&self, client: usize, round: usize) -> u64 {
        self.derive("warmup_mask", client as u64, round as u64)
    }

    /// Generic stream for auxiliary fixtures (oracles, tests).
    pub fn aux(&self, purpose: &str, index: u64) -> u64 {
        self.derive(purpose, index, 0)
    }
}

/// The RNG used throughout the crate.
pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
