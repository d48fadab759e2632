//! Seeded, version-stable shuffling.
//!
//! The generator is ChaCha8 seeded through `SeedableRng::seed_from_u64`.
//! Bounded draws use Lemire's multiply-and-reject on raw `next_u64` output and
//! the shuffle is a plain Fisher-Yates pass from the back, so a given seed
//! yields the same permutation regardless of `rand`'s own sampling internals.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent stream seed, e.g. one per category.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Uniform integer in `0..bound`. `bound` must be nonzero.
pub fn bounded(rng: &mut impl RngCore, bound: u64) -> u64 {
    assert!(bound > 0, "bound must be positive");
    let threshold = bound.wrapping_neg() % bound;
    loop {
        let product = u128::from(rng.next_u64()) * u128::from(bound);
        if (product as u64) >= threshold {
            return (product >> 64) as u64;
        }
    }
}

pub fn shuffle<T>(items: &mut [T], rng: &mut impl RngCore) {
    for i in (1..items.len()).rev() {
        let j = bounded(rng, i as u64 + 1) as usize;
        items.swap(i, j);
    }
}

pub fn shuffled_indices(len: usize, seed: u64) -> Vec<usize> {
    let mut indices: Vec<usize> = (0..len).collect();
    shuffle(&mut indices, &mut rng_from_seed(seed));
    indices
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permutation_and_determinism() {
        let a = shuffled_indices(1000, 7);
        let b = shuffled_indices(1000, 7);
        assert_eq!(a, b);
        let mut sorted = a.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..1000).collect::<Vec<_>>());
        assert_ne!(a, shuffled_indices(1000, 8));
    }

    #[test]
    fn bounded_is_roughly_uniform() {
        let mut rng = rng_from_seed(1);
        let mut counts = [0usize; 6];
        for _ in 0..60_000 {
            counts[bounded(&mut rng, 6) as usize] += 1;
        }
        for c in counts {
            assert!((9_400..10_600).contains(&c), "{counts:?}");
        }
    }

    #[test]
    fn derived_streams_differ() {
        assert_ne!(derive_seed(42, 0), derive_seed(42, 1));
        assert_eq!(derive_seed(42, 3), derive_seed(42, 3));
    }
}
