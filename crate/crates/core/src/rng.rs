//! Seeded randomness.
//!
//! Every random draw in the crate comes from a ChaCha8 stream keyed by the run
//! seed. The 64-bit stream id is a hash of a purpose tag and integer indices
//! (epoch, group, ...), so each consumer owns an independent counter-based
//! stream and results do not depend on scheduling or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Opens the stream for `(seed, purpose, indices)`.
pub fn stream(seed: u64, purpose: &str, indices: &[u64]) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id(purpose, indices));
    rng
}

fn stream_id(purpose: &str, indices: &[u64]) -> u64 {
    // FNV-1a over the tag, then splitmix64 folding of the indices.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in purpose.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    for &i in indices {
        h = splitmix64(h ^ splitmix64(i));
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
