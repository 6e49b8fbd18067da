//! Seeded pseudo-random streams.
//!
//! Every stochastic step in the crate draws from xoshiro256++ seeded through
//! SplitMix64 (`SeedableRng::seed_from_u64`), so a seed fully determines a run
//! on a given platform.

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

pub type Rng = Xoshiro256PlusPlus;

pub fn seeded(seed: u64) -> Rng {
    Xoshiro256PlusPlus::seed_from_u64(seed)
}

/// Derives an independent sub-seed for a named stream (SplitMix64 finalizer).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stream tags used with [`derive_seed`].
pub(crate) mod stream {
    pub const SPLIT: u64 = 1;
    pub const PROTOTYPES: u64 = 2;
    pub const SAMPLES: u64 = 3;
    pub const BATCHES: u64 = 4;
    pub const INIT: u64 = 5;
    pub const EPOCH: u64 = 6;
    pub const GRADCHECK: u64 = 7;
    pub const FRACTION: u64 = 8;
    pub const DEGRADE: u64 = 9;
}
