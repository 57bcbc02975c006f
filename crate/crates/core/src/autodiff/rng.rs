//! Counter-based random streams.
//!
//! Every stochastic draw is addressed by `(seed, stream, offset)`: the seed
//! keys a ChaCha8 generator, the stream id selects an independent sequence and
//! the offset is the word position inside it. Any mask can therefore be
//! replayed without re-running the computation that preceded it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Forward-pass mode. Dropout only fires in `Train`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeedStream {
    seed: u64,
    stream: u64,
    offset: u128,
}

impl SeedStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        SeedStream {
            seed,
            stream,
            offset: 0,
        }
    }

    /// Stream id derived from a small tuple of counters (step, episode, purpose...).
    pub fn keyed(seed: u64, parts: &[u64]) -> Self {
        Self::new(seed, mix(parts))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    pub fn offset(&self) -> u128 {
        self.offset
    }

    fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.offset);
        rng
    }

    /// Draw `n` keep/drop decisions; each element is dropped with probability `rate`.
    /// Consumes exactly `n` 32-bit words.
    pub fn keep_mask(&mut self, n: usize, rate: f64) -> Vec<bool> {
        let mut rng = self.rng();
        let threshold = (rate * 4_294_967_296.0) as u64;
        let mask = (0..n).map(|_| (rng.gen::<u32>() as u64) >= threshold).collect();
        self.offset += n as u128;
        mask
    }

    /// Uniform draws in [0, 1), consuming two words each.
    pub fn uniforms(&mut self, n: usize) -> Vec<f64> {
        let mut rng = self.rng();
        let out = (0..n).map(|_| rng.gen::<f64>()).collect();
        self.offset += 2 * n as u128;
        out
    }
}

/// SplitMix64-style combination of counters into one 64-bit key.
pub fn mix(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}
