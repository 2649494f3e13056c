//! The portable random source used everywhere a seed appears.
//!
//! The generator is ChaCha8 (`rand_chacha::ChaCha8Rng`) seeded through
//! `SeedableRng::seed_from_u64`. Uniform draws use `rand 0.8`'s
//! `Uniform`/`gen_range` sampling and normal draws use `rand_distr 0.4`'s
//! `StandardNormal` ziggurat. Streams are identical on every platform for
//! those crate versions.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type PortableRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> PortableRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derive an independent sub-seed for a named purpose.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
