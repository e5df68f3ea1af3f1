//! Seed derivation. Every random draw in the crate comes from a ChaCha8
//! stream whose seed is a pure function of the run seed and a tag path, so
//! concurrent clients never share generator state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a base seed with a purpose label and a list of indices.
pub fn derive_seed(seed: u64, label: &str, indices: &[u64]) -> u64 {
    let mut h = splitmix64(seed);
    for b in label.bytes() {
        h = splitmix64(h ^ u64::from(b));
    }
    for &i in indices {
        h = splitmix64(h ^ splitmix64(i.wrapping_add(0x5151)));
    }
    h
}

pub fn rng_from(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn derived_rng(seed: u64, label: &str, indices: &[u64]) -> Rng {
    rng_from(derive_seed(seed, label, indices))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_and_indices_separate_streams() {
        let a = derive_seed(1, "train", &[0, 1]);
        assert_eq!(a, derive_seed(1, "train", &[0, 1]));
        assert_ne!(a, derive_seed(1, "train", &[1, 0]));
        assert_ne!(a, derive_seed(1, "poison", &[0, 1]));
        assert_ne!(a, derive_seed(2, "train", &[0, 1]));
    }
}
