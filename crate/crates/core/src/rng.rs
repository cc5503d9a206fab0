//! Named, independently seeded random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Consumers of randomness. Each gets its own ChaCha stream so that, for
/// example, toggling dropout never shifts weight initialization.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Init = 1,
    Dropout = 2,
    Shuffle = 3,
    Folds = 4,
    Grid = 5,
    Synth = 6,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Mix several integers into one seed (splitmix64 finalizer per step).
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}
