//! Seed derivation for independent deterministic RNG streams.
//!
//! Every stage that needs randomness takes one user-facing `u64` seed and
//! derives child seeds from it with a splitmix64 step, so streams for
//! different samples or stages never alias and never depend on iteration
//! order.

/// Derive a child seed from `base` and a stream index.
pub fn derive(base: u64, index: u64) -> u64 {
    splitmix64(base ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// Derive a child seed from `base`, a stream index, and a salt that keeps
/// distinct uses of the same index apart.
pub fn derive2(base: u64, index: u64, salt: u64) -> u64 {
    derive(derive(base, index), salt)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
