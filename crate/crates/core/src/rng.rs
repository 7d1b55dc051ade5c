//! Seed derivation for reproducible parallel simulation.
//!
//! Every parallel unit of work (a day of ticks, a bootstrap subset, a block
//! of Monte Carlo draws) gets its own counter-based stream derived from the
//! master seed, so results do not depend on scheduling order.

use rand_chacha::ChaCha12Rng;
use rand_chacha::rand_core::SeedableRng;

/// SplitMix64 finalizer; good avalanche, cheap, stable across platforms.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from `(master, stream)`.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    splitmix64(splitmix64(master) ^ splitmix64(stream.wrapping_mul(0x9e37_79b9_7f4a_7c15)))
}

/// RNG for one labelled stream.
pub fn stream_rng(master: u64, stream: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(derive_seed(master, stream))
}
