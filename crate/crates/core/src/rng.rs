use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// All stochastic components draw from explicitly seeded ChaCha streams so
/// that runs are bit-reproducible across platforms.
pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive an independent sub-seed for a named component of a run.
pub fn derive(master: u64, tag: u64) -> u64 {
    splitmix64(master ^ splitmix64(tag))
}

/// Component tags for sub-seed derivation. Fixed constants: changing them
/// changes every derived stream.
pub mod tags {
    pub const FEATURES: u64 = 1;
    pub const NETWORK_INIT: u64 = 2;
    pub const PQ_FIT: u64 = 3;
    pub const ORDERING: u64 = 4;
    pub const BUFFER: u64 = 5;
    pub const SLEEP: u64 = 6;
    pub const BASE_INIT: u64 = 7;
    pub const DATASET: u64 = 8;
}
