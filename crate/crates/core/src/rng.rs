//! Named, seed-derived random streams.
//!
//! Every stage of a run draws from its own stream keyed by `(seed, name)`, so
//! adding or reordering stages never shifts the numbers another stage sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Independent stream for stage `name` under root `seed`.
pub fn substream(seed: u64, name: &str) -> StreamRng {
    StreamRng::seed_from_u64(splitmix64(seed ^ splitmix64(fnv1a(name.as_bytes()))))
}
