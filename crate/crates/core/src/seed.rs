//! Seed fan-out. Every stochastic stage derives its seed from the master seed
//! and a stage name, so no stage reads ambient randomness.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, b| (h ^ u64::from(*b)).wrapping_mul(FNV_PRIME))
}

/// SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// `splitmix64(master ⊕ fnv1a64(stage))`.
pub fn derive_seed(master: u64, stage: &str) -> u64 {
    splitmix64(master ^ fnv1a64(stage.as_bytes()))
}

/// Seed for the `index`-th instance of a stage (participant, shadow model, round).
pub fn derive_indexed(master: u64, stage: &str, index: u64) -> u64 {
    splitmix64(derive_seed(master, stage) ^ splitmix64(index))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
