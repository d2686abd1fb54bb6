//! Deterministic RNG stream derivation.
//!
//! Every random decision in the crate draws from a ChaCha8 stream keyed by a
//! base seed plus a small tuple of context tags (purpose, rank, step, ...).
//! Streams for distinct tags are independent, and a given tag always produces
//! the same stream, so simulated data-parallel ranks behave identically
//! whether they run serially or concurrently.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer; good avalanche for combining tag words.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives an independent stream from `seed` and context `tags`.
///
/// Tag order matters: `(1, 2)` and `(2, 1)` give different streams.
pub fn stream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut state = mix(seed ^ 0x6a09_e667_f3bc_c908);
    for (i, &t) in tags.iter().enumerate() {
        state = mix(state ^ t.wrapping_add(mix(i as u64 + 1)));
    }
    ChaCha8Rng::seed_from_u64(state)
}
