//! Deterministic seed splitting.
//!
//! All randomness in a run derives from one master seed. Every consumer asks
//! for a stream keyed by (module tag, index, step) so that results do not
//! depend on evaluation order or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn tag_hash(tag: &str) -> u64 {
    // FNV-1a
    tag.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Derive a child seed for `(tag, index, step)` from `master`.
pub fn derive_seed(master: u64, tag: &str, index: u64, step: u64) -> u64 {
    let mut h = splitmix(master);
    h = splitmix(h ^ tag_hash(tag));
    h = splitmix(h ^ index);
    splitmix(h ^ step.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

pub fn stream(master: u64, tag: &str, index: u64, step: u64) -> Rng {
    Rng::seed_from_u64(derive_seed(master, tag, index, step))
}

pub fn from_seed(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}
