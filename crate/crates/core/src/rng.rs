//! Deterministic random streams.
//!
//! Every stream is a ChaCha8 generator whose 256-bit key is derived from a
//! 64-bit root seed and a purpose label. Derivation: the label is hashed with
//! 64-bit FNV-1a, xored into the seed, and the result is expanded into four
//! key words with SplitMix64. The construction is fixed; changing it changes
//! every pinned value in the test suite.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(label: &str) -> u64 {
    label.bytes().fold(FNV_OFFSET, |h, b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from `seed` for the given purpose label.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut s = seed ^ fnv1a(label);
    splitmix64(&mut s)
}

/// Opens the stream for `(seed, label)`.
pub fn stream(seed: u64, label: &str) -> Rng {
    let mut s = seed ^ fnv1a(label);
    let mut key = [0u8; 32];
    for chunk in key.chunks_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut s).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Opens the stream for `(seed, label, index)`, e.g. one bootstrap resample.
pub fn indexed_stream(seed: u64, label: &str, index: u64) -> Rng {
    stream(derive_seed(seed, label) ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15), label)
}
