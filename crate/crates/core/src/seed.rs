//! Seed derivation for reproducible, schedule-independent randomness.
//!
//! Every random stream in the crate is keyed by a master seed plus a path of
//! integer labels (client id, round, cell index, ...). Streams never depend on
//! the order in which work is scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream labels used to separate independent uses of one master seed.
#[allow(clippy::unusual_byte_groupings)] // ASCII tags, grouped by character pairs
pub mod stream {
    pub const PHASE1: u64 = 0x5048_4153_4531;
    pub const SAMPLE: u64 = 0x5341_4d50_4c45;
    pub const INIT: u64 = 0x494e_4954;
    pub const LOCAL: u64 = 0x4c4f_4341_4c;
    pub const NOISE: u64 = 0x4e4f_4953_45;
    pub const PROBE: u64 = 0x5052_4f42_45;
    pub const SYNTH: u64 = 0x5359_4e54_48;
    pub const PARTITION: u64 = 0x5041_5254;
    pub const KMEANS: u64 = 0x4b4d_4541_4e53;
    pub const VERIFY: u64 = 0x5645_5249_4659;
}

#[inline]
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Mixes a master seed with a path of labels into a child seed.
pub fn derive(master: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(master), |acc, &label| splitmix64(acc ^ splitmix64(label)))
}

/// A ChaCha8 generator for the stream at `path` under `master`.
pub fn rng(master: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(master, path))
}

/// Stable 64-bit FNV-1a hash, used to key per-cell noise by cell id.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derive_separates_paths() {
        assert_ne!(derive(1, &[0, 1]), derive(1, &[1, 0]));
        assert_ne!(derive(1, &[0]), derive(2, &[0]));
        assert_eq!(derive(9, &[3, 4]), derive(9, &[3, 4]));
    }

    #[test]
    fn fnv_known_value() {
        assert_eq!(fnv1a(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a(b"a"), 0xaf63_dc4c_8601_ec8c);
    }
}
