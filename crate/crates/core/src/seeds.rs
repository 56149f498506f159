//! Deterministic seed derivation. Every random decision in the pipeline
//! draws from a ChaCha stream seeded through `derive`, so independent
//! concerns (case synthesis, label assignment, split shuffles, weight init,
//! epoch shuffles) never share or race a stream. This keeps results
//! identical regardless of worker count or evaluation order.

/// Domain tags. Each consumer of randomness gets its own tag so streams
/// derived from the same run seed are independent.
pub const TAG_CASE: u64 = 1;
pub const TAG_LABELS: u64 = 2;
pub const TAG_SPLIT: u64 = 3;
pub const TAG_INIT: u64 = 4;
pub const TAG_SHUFFLE: u64 = 5;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix a run seed, a domain tag and an index into a fresh stream seed.
pub fn derive(seed: u64, tag: u64, index: u64) -> u64 {
    splitmix64(splitmix64(seed ^ tag.wrapping_mul(0xA076_1D64_78BD_642F)) ^ index)
}
