//! Reproducible simulation randomness.
//!
//! Every logical actor owns one [`RngStream`]. A stream is ChaCha8 keyed by
//! `rand_core`'s `seed_from_u64(seed)` expansion with the ChaCha stream
//! (nonce) word set to `stream`, so one seed fans out into independent
//! streams and the draw sequence is identical on every platform.
//!
//! This is simulation randomness only; secret-dependent randomness comes
//! from the KDF.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self {
            seed,
            stream,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform draw in `[0, 1)` with 53 bits of resolution.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn bit(&mut self) -> bool {
        self.next_u64() >> 63 == 1
    }

    /// `true` with probability `p`.
    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }
}
