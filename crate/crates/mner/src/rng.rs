//! Deterministic RNG streams.
//!
//! Every stochastic component draws from a ChaCha stream derived from the master
//! seed and a fixed integer path (for example `[STREAM_REPLICATE, l]` for Monte
//! Carlo replicate `l`, or `[STREAM_BOOTSTRAP, l, b]` for bootstrap replicate `b`
//! nested inside `l`). Streams depend only on the seed and path, never on thread
//! scheduling, so results are identical for any worker count.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

pub const STREAM_DESIGN: u64 = 1;
pub const STREAM_REPLICATE: u64 = 2;
pub const STREAM_BOOTSTRAP: u64 = 3;
pub const STREAM_RESTART: u64 = 4;
/// Reference Monte Carlo run that estimates the true MSE, kept disjoint from
/// the outer replicate streams it is compared against.
pub const STREAM_TRUE_MSE: u64 = 5;

/// SplitMix64 finalizer; full-period mixing of a 64-bit counter.
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive an independent ChaCha12 stream from `master_seed` and `path`.
pub fn stream(master_seed: u64, path: &[u64]) -> ChaCha12Rng {
    let mut state = master_seed ^ 0x6a09_e667_f3bc_c908;
    let mut mixed = splitmix64(&mut state);
    for &part in path {
        state ^= part.wrapping_mul(0x9e37_79b9_7f4a_7c15).rotate_left(17);
        mixed = splitmix64(&mut state) ^ mixed.rotate_left(31);
    }
    let mut seed = [0u8; 32];
    for chunk in seed.chunks_mut(8) {
        state ^= mixed;
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha12Rng::from_seed(seed)
}
