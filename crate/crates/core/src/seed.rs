//! Deterministic derivation of child seeds from a master seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Mixes `master` with a path of indices (splitmix64 finalizer per step).
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    let mut s = master;
    for &p in path {
        s = mix(s ^ mix(p.wrapping_add(0x9e37_79b9_7f4a_7c15)));
    }
    s
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn rng_for(master: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, path))
}
