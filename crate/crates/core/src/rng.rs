//! Reproducible random streams.
//!
//! Every stochastic routine takes an explicit seed and derives independent
//! [`ChaCha8Rng`] streams from it with [`derive_seed`]. A stream is keyed by a
//! path of integers (for example `(master, replicate, subject)`), so the
//! numbers a subject or replicate sees do not depend on the order in which
//! work is scheduled.
//!
//! The splitting function folds each key into a 64-bit state with the
//! SplitMix64 finalizer:
//!
//! ```text
//! state = seed
//! for key in path: state = mix64(state ^ mix64(key + 0x9E3779B97F4A7C15))
//! ```
//!
//! String keys (subject ids) are first hashed with 64-bit FNV-1a.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags used across the crate, so that differently-purposed streams
/// derived from the same seed never collide.
pub mod tag {
    pub const SIMULATE: u64 = 1;
    pub const SAEM_SUBJECT: u64 = 2;
    pub const CONDITIONAL: u64 = 3;
    pub const BOOTSTRAP: u64 = 4;
    pub const REPLICATE: u64 = 6;
}

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from `seed` and a key path.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter().fold(mix64(seed), |state, &key| mix64(state ^ mix64(key.wrapping_add(0x9E37_79B9_7F4A_7C15))))
}

/// 64-bit FNV-1a hash of a string key.
pub fn hash_str(key: &str) -> u64 {
    key.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01B3))
}

/// Build a generator for the stream at `path` below `seed`.
pub fn stream(seed: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, path))
}
