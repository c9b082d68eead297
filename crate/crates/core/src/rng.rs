//! Seed expansion: one top-level seed is split into independent, named
//! streams so results do not depend on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from a parent seed and a tag path.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(seed), |acc, &t| splitmix64(acc ^ splitmix64(t.wrapping_add(0x632B_E59B_D9B4_E019))))
}

pub fn rng_from(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tags))
}

/// Per-row stream: same key stream for the seed, stream id = row.
pub fn row_rng(seed: u64, row: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(row as u64);
    rng
}

// stream tags
pub(crate) const TAG_KMEANS: u64 = 1;
pub(crate) const TAG_GRAPH: u64 = 2;
pub(crate) const TAG_MEANS: u64 = 3;
pub(crate) const TAG_SCALING: u64 = 4;
pub(crate) const TAG_SAMPLE: u64 = 5;
pub(crate) const TAG_CALIBRATION: u64 = 6;
pub(crate) const TAG_SUBSAMPLE: u64 = 7;
pub(crate) const TAG_REPLICATE: u64 = 8;
