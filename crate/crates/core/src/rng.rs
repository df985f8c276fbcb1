//! Portable seeded randomness.
//!
//! Every random decision in the crate goes through a ChaCha8 stream seeded
//! from a `u64`, and index draws use a widening multiply rather than the
//! `rand` range API so that reruns agree across `rand` releases and across
//! reimplementations in other languages:
//!
//! ```text
//! draw(n) = (next_u64() as u128 * n as u128) >> 64
//! ```
//!
//! Shuffles are Fisher–Yates from the back: for `i` in `(1..len).rev()`,
//! swap `i` with `draw(i + 1)`.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Stream identifiers, so that independent consumers of one seed never share
/// a keystream.
pub mod stream {
    pub const CORESET_INIT: u64 = 1;
    pub const EPOCH_SHUFFLE: u64 = 2;
    pub const EVOLVE_SUBSET: u64 = 3;
    pub const SYNTH: u64 = 4;
    pub const RANDOM_ARM: u64 = 5;
}

pub fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Mixes a per-item index into a seed (SplitMix64 finalizer), giving each
/// item its own independent stream.
pub fn derive(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Uniform index in `0..n`. `n` must be non-zero.
pub fn draw_index<R: RngCore>(rng: &mut R, n: usize) -> usize {
    debug_assert!(n > 0);
    ((rng.next_u64() as u128 * n as u128) >> 64) as usize
}

pub fn fisher_yates<T, R: RngCore>(rng: &mut R, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = draw_index(rng, i + 1);
        items.swap(i, j);
    }
}

/// First `k` elements of a Fisher–Yates pass run from the front; a uniform
/// sample without replacement, in draw order.
pub fn sample_without_replacement<T: Clone, R: RngCore>(
    rng: &mut R,
    items: &[T],
    k: usize,
) -> Vec<T> {
    let mut pool: Vec<T> = items.to_vec();
    let k = k.min(pool.len());
    for i in 0..k {
        let j = i + draw_index(rng, pool.len() - i);
        pool.swap(i, j);
    }
    pool.truncate(k);
    pool
}
