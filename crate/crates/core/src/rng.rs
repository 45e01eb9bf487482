//! Deterministic randomness.
//!
//! Every stream is a ChaCha8 generator (`rand_chacha::ChaCha8Rng`) keyed by
//! a 64-bit seed through `SeedableRng::seed_from_u64`. ChaCha is counter
//! based, so a stream depends only on its seed and is identical across
//! platforms. Parallel work never shares a stream: each task derives its own
//! child seed with [`RngSeed::derive`], a SplitMix64 mix of the parent seed
//! and a stream index.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub type Rng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RngSeed(pub u64);

impl RngSeed {
    /// Child seed for stream `index`.
    pub fn derive(self, index: u64) -> RngSeed {
        RngSeed(splitmix64(
            splitmix64(self.0) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03),
        ))
    }

    /// Child seed for a named purpose.
    pub fn derive_named(self, name: &str) -> RngSeed {
        // FNV-1a over the name bytes
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in name.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01B3);
        }
        self.derive(h)
    }

    pub fn rng(self) -> Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }

    /// A uniform draw in `[0, 1)` that depends only on `(self, index)`.
    pub fn unit_at(self, index: u64) -> f64 {
        (self.derive(index).0 >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
