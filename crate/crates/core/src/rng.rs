//! Deterministic random-stream plumbing.
//!
//! Every source of randomness in the crate is a ChaCha stream derived from a
//! master seed plus a fixed subsystem label, so adding or removing draws in
//! one subsystem never shifts another subsystem's stream. Per-item streams
//! (one per image, per augmentation slot, ...) are derived the same way from
//! an item index, which keeps results independent of iteration interleaving.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer; a well-mixed 64-bit hash used only for seed derivation.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Mix a seed with a label and an index into a fresh 64-bit seed.
pub fn derive_seed(master: u64, label: &str, index: u64) -> u64 {
    let mut h = splitmix64(master);
    for &b in label.as_bytes() {
        h = splitmix64(h ^ u64::from(b));
    }
    splitmix64(h ^ index)
}

/// A fresh deterministic RNG for `(master, label, index)`.
pub fn stream(master: u64, label: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, label, index))
}
