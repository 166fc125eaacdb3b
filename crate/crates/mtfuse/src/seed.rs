//! Counter-based RNG derivation.
//!
//! Every random decision in the crate draws from a ChaCha12 stream keyed by
//! (base seed, salt string, counter). Independent streams never share state,
//! so resuming training or regenerating a scene reproduces bits exactly
//! without serializing RNG state.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

#[inline]
fn splitmix(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic RNG for the stream identified by (seed, salt, k).
pub fn derive_rng(seed: u64, salt: &str, k: u64) -> ChaCha12Rng {
    let mut state = seed ^ 0x6D74_6675_7365_3031; // domain separator
    for &byte in salt.as_bytes() {
        state ^= byte as u64;
        splitmix(&mut state);
    }
    state ^= k;
    splitmix(&mut state);
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix(&mut state).to_le_bytes());
    }
    ChaCha12Rng::from_seed(key)
}
