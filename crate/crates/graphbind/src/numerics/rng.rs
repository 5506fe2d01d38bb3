//! Seeded randomness.
//!
//! All stochastic steps draw from ChaCha8 streams keyed by (seed, stream).
//! ChaCha8 is deterministic across platforms, so identical (seed, stream)
//! pairs yield bit-identical draws everywhere. Stream ids keep independent
//! concerns (init, batching, masking, ...) from consuming each other's draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream ids, one per independent source of randomness in a run.
pub mod streams {
    pub const DATA: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const INIT_BASE: u64 = 100; // + modality index
    pub const BATCH: u64 = 3;
    pub const MISSING: u64 = 4;
}

pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// SplitMix64 finalizer.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Derive an independent sub-seed, e.g. one per modality. Adjacent run seeds
/// must not collide with adjacent salts, hence the double mix.
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    splitmix64(seed ^ splitmix64(salt))
}
