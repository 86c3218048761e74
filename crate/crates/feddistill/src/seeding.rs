//! Deterministic seed derivation. Every random stream in a run is derived
//! from the experiment seed plus a tag path, so runs are reproducible and
//! streams never alias across purposes.

pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds `parts` into `base` one mix step at a time. Order matters.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(base), |acc, &p| splitmix64(acc ^ p.wrapping_mul(0x9E37_79B9_7F4A_7C15)))
}

pub const TAG_INIT: u64 = 0x01;
pub const TAG_PARTITION: u64 = 0x02;
pub const TAG_ROUND_PLAN: u64 = 0x03;
pub const TAG_CLIENT: u64 = 0x04;
