//! Named sub-seeds: every random stream in a run derives from one config seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// `hash64(seed, component)`: the first 8 bytes (little-endian) of
/// `SHA-256(seed as 8 little-endian bytes || component as UTF-8)`.
pub fn sub_seed(seed: u64, component: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(component.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

pub fn rng_for(seed: u64, component: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(sub_seed(seed, component))
}
