//! Named random sub-streams derived from one 64-bit seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream used for parameter initialization.
pub const INIT: &str = "init";
/// Stream used for per-epoch batch shuffling.
pub const SHUFFLE: &str = "shuffle";
/// Stream used for the train/validation split.
pub const SPLIT: &str = "split";

/// A generator for sub-stream `name` of `seed`.
///
/// Different names give independent ChaCha streams under the same key, so
/// adding draws to one stream never perturbs another.
pub fn substream(seed: u64, name: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(name.as_bytes()));
    rng
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}
