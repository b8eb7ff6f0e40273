//! Deterministic RNG streams.
//!
//! Every stochastic component draws from a ChaCha stream derived from the
//! run seed plus a label and index, so any piece of the pipeline can be
//! re-run in isolation and chains never share a stream.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

pub type Rng = ChaCha12Rng;

/// Derives an independent substream from `seed` for (`label`, `index`).
///
/// The 32-byte ChaCha key mixes the inputs with splitmix-style finalizers;
/// distinct (label, index) pairs give unrelated streams.
pub fn substream(seed: u64, label: &str, index: u64) -> Rng {
    let mut key = [0u8; 32];
    let label_hash = fnv1a(label.as_bytes());
    let mut x = seed;
    for (i, chunk) in key.chunks_mut(8).enumerate() {
        x = splitmix64(x ^ label_hash.rotate_left(i as u32) ^ (index.wrapping_mul(0x9e37_79b9_7f4a_7c15)));
        chunk.copy_from_slice(&x.to_le_bytes());
    }
    ChaCha12Rng::from_seed(key)
}

/// Root stream for a chain.
pub fn chain_rng(seed: u64, chain: u64) -> Rng {
    substream(seed, "chain", chain)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
