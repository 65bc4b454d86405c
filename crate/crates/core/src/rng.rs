//! Counter-based, splittable random streams.
//!
//! Every trial gets its own ChaCha8 stream keyed by a sub-seed derived from
//! `(master_seed, index)`, so results never depend on thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Sub-seed for stream `index` under `master`.
pub fn sub_seed(master: u64, index: u64) -> u64 {
    mix(mix(master.wrapping_add(GOLDEN)) ^ index.wrapping_mul(GOLDEN).wrapping_add(1))
}

/// Stream for a given seed.
pub fn stream(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stream for trial `index` of an experiment seeded with `master`.
pub fn trial_stream(master: u64, index: u64) -> Rng {
    stream(sub_seed(master, index))
}
