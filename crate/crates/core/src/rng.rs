//! Named, reproducible random streams.
//!
//! Every consumer derives its generator from the run seed, a stream name and
//! an item index, so adding a stream never shifts the numbers another stream
//! sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn fnv1a(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Generator for item `index` of stream `name` under `seed`.
pub fn stream(seed: u64, name: &str, index: u64) -> Rng {
    let key = splitmix(splitmix(seed ^ fnv1a(name)).wrapping_add(index));
    ChaCha8Rng::seed_from_u64(key)
}
