//! Derived deterministic RNG streams.
//!
//! Every stochastic site derives its own ChaCha stream from the run seed
//! plus a tag path (e.g. `(seed, stream_id, layer, param)`), so results do
//! not depend on scheduling or on the order unrelated sites consume
//! randomness.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 step; used only to spread tag paths over the key space.
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic derived seed for `(seed, tags...)`.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    use rand::Rng;
    substream(seed, tags).gen()
}

/// Deterministic substream for `(seed, tags...)`.
pub fn substream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut state = seed ^ 0x6d75_7374_6761_6e00; // domain separation
    let mut key = [0u8; 32];
    for t in tags {
        state ^= t.wrapping_mul(0x2545_f491_4f6c_dd1d);
        splitmix64(&mut state);
    }
    for chunk in key.chunks_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
