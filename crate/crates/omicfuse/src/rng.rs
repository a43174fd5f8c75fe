//! Deterministic random-stream derivation.
//!
//! A single root seed fans out to named substreams ("init", "data", "batch",
//! "mask", ...) so each part of the pipeline is independently reproducible:
//! replaying one substream never consumes draws from another, and per-sample
//! streams are addressed by index so batch composition does not depend on
//! worker count or visitation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a, used to map substream names onto ChaCha stream ids.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Substream addressed by `(name, index)` under a root seed.
pub fn substream(seed: u64, name: &str, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stream = fnv1a(name.as_bytes())
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(index);
    rng.set_stream(stream);
    rng
}

/// Substream addressed by `(name, a, b)`, e.g. `(epoch, sample)`.
pub fn substream2(seed: u64, name: &str, a: u64, b: u64) -> ChaCha8Rng {
    substream(seed, name, a.wrapping_mul(0x1000_0000_01b3).wrapping_add(b))
}
