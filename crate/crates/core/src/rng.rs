//! Deterministic RNG plumbing. Every randomized component takes a seed (or an
//! explicit generator) so that runs are reproducible bit-for-bit.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

/// The one generator type used throughout the crate.
pub type Rng = ChaCha20Rng;

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

/// splitmix64 step; used to derive independent child seeds.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derive a child seed from a base seed and a list of tags (e.g. iteration
/// and clip index), so each (base, tags) combination gets an independent
/// deterministic stream.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mut s = splitmix64(base ^ 0x52464c5f53454544); // "RFL_SEED"
    for &t in tags {
        s = splitmix64(s ^ t);
    }
    s
}
