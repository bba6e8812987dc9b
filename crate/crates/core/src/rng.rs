//! Deterministic random streams.
//!
//! All randomness in a run flows from one root seed. Components draw from
//! named substreams (`init`, `shuffle`, `synth`, ...) so that, for example,
//! re-running the shuffle test consumes the same permutations regardless of
//! how many models were initialized before it.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derive the seed of substream `domain`/`index` from a root seed.
pub fn substream_seed(root: u64, domain: &str, index: u64) -> u64 {
    let mut state = root ^ fnv1a(domain.as_bytes());
    let a = splitmix64(&mut state);
    state ^= index;
    a ^ splitmix64(&mut state)
}

/// A reproducible generator for one substream.
pub fn substream(root: u64, domain: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(substream_seed(root, domain, index))
}
