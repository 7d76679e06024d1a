//! Seed derivation for schedule-independent parallel work.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Mixes a task index into a base seed (splitmix64 finalizer).
pub fn derive_seed(seed: u64, task: u64) -> u64 {
    let mut z = seed ^ task.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn task_rng(seed: u64, task: u64) -> ChaCha8Rng {
    rng(derive_seed(seed, task))
}
