//! Counter-based seeded random streams.
//!
//! Every random draw in the crate comes from a [`SeededStream`] addressed by
//! `(seed, stream id)`. Stream ids are derived from a purpose tag plus a
//! small key path (epoch, sample, step, location, ...), so the draws that
//! one consumer sees never depend on how many draws another consumer made
//! or on the order in which parallel work completes.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// What a stream is used for. Part of the stream-id derivation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    TrainOrder = 2,
    Dropout = 3,
    Shuffle = 4,
    Corpus = 5,
    Split = 6,
    Gumbel = 7,
    EvalOrder = 8,
    Order = 9,
    Test = 10,
}

/// SplitMix64 finalizer; used only to fold key paths into stream ids.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a 64-bit stream id from a purpose and a key path.
pub fn stream_id(purpose: Purpose, keys: &[u64]) -> u64 {
    let mut h = mix(purpose as u64);
    for &k in keys {
        h = mix(h ^ mix(k));
    }
    h
}

/// A deterministic random stream: ChaCha8 keyed by `seed`, positioned on
/// stream `stream`. Identical `(seed, stream)` pairs yield identical draws
/// on every platform.
#[derive(Clone, Debug)]
pub struct SeededStream {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
}

impl SeededStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { seed, stream, rng }
    }

    /// Stream for `purpose` at the given key path.
    pub fn keyed(seed: u64, purpose: Purpose, keys: &[u64]) -> Self {
        Self::new(seed, stream_id(purpose, keys))
    }

    /// A child stream that shares the seed but lives on a derived stream id.
    pub fn derive(&self, keys: &[u64]) -> Self {
        let mut h = mix(self.stream);
        for &k in keys {
            h = mix(h ^ mix(k));
        }
        Self::new(self.seed, h)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Number of 32-bit words consumed so far.
    pub fn counter(&self) -> u128 {
        self.rng.get_word_pos()
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 bits of resolution.
    pub fn uniform(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }

    /// Uniform in the open interval `(0, 1)`.
    pub fn uniform_open(&mut self) -> f64 {
        loop {
            let u = self.uniform();
            if u > 0.0 {
                return u;
            }
        }
    }

    /// Uniform integer in `[0, n)`. Draws through `u64` so results do not
    /// depend on the platform's pointer width.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        self.rng.gen_range(0..n as u64) as usize
    }

    /// Standard normal draw.
    pub fn normal(&mut self) -> f64 {
        self.rng.sample(rand_distr::StandardNormal)
    }

    /// Standard Gumbel draw (location 0, scale 1).
    pub fn gumbel(&mut self) -> f64 {
        -(-self.uniform_open().ln()).ln()
    }

    /// Bernoulli draw with success probability `p`.
    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }
}
