//! Deterministic seed derivation.
//!
//! Everything that samples (role assignment, augmentation factors, data
//! order, weight init) derives its random stream from a stable mix of the
//! global seed and a handful of context labels, so results do not depend on
//! thread count, dataset order, or std hash internals.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Accumulates labels and integers into a single 64-bit state.
#[derive(Debug, Clone, Copy)]
pub struct SeedMixer {
    state: u64,
}

impl SeedMixer {
    pub fn new(seed: u64) -> Self {
        Self {
            state: splitmix64(seed ^ 0x5EED_0F_C0FFEE),
        }
    }

    pub fn mix_u64(mut self, v: u64) -> Self {
        self.state = splitmix64(self.state ^ v.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        self
    }

    pub fn mix_str(mut self, s: &str) -> Self {
        for chunk in s.as_bytes().chunks(8) {
            let mut buf = [0u8; 8];
            buf[..chunk.len()].copy_from_slice(chunk);
            self = self.mix_u64(u64::from_le_bytes(buf) ^ chunk.len() as u64);
        }
        self.state = splitmix64(self.state ^ s.len() as u64);
        self
    }

    /// Expand the mixed state into a full ChaCha seed.
    pub fn rng(self) -> ChaCha8Rng {
        let mut seed = [0u8; 32];
        let mut s = self.state;
        for word in seed.chunks_exact_mut(8) {
            s = splitmix64(s);
            word.copy_from_slice(&s.to_le_bytes());
        }
        ChaCha8Rng::from_seed(seed)
    }

    pub fn value(self) -> u64 {
        self.state
    }
}
