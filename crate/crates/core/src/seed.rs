//! Deterministic seed derivation.
//!
//! Every randomized routine in the crate takes an explicit master seed and
//! derives independent sub-stream seeds from it, so results never depend on
//! call order or thread scheduling.

/// One SplitMix64 step.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a stream seed from `base` and a stream tag.
pub fn derive_seed(base: u64, salt: u64) -> u64 {
    splitmix64(base ^ splitmix64(salt))
}
