//! Keyed random substreams.
//!
//! Every random draw in the crate comes from a generator keyed by the run
//! seed plus a purpose tag and indices such as `(epoch, sample)`, so work can
//! be split or resumed without replaying earlier draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Purpose tags keep substreams for different consumers disjoint.
pub mod tag {
    pub const DATA: u64 = 1;
    pub const EPOCH_ORDER: u64 = 2;
    pub const SAMPLE: u64 = 3;
    pub const INIT: u64 = 4;
    pub const DECODE: u64 = 5;
    pub const EVAL: u64 = 6;
    pub const VALIDATION: u64 = 7;
    pub const NOISE: u64 = 8;
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn mix(seed: u64, keys: &[u64]) -> u64 {
    keys.iter()
        .fold(splitmix64(seed), |h, &k| splitmix64(h ^ splitmix64(k)))
}

pub fn substream(seed: u64, keys: &[u64]) -> Rng {
    Rng::seed_from_u64(mix(seed, keys))
}
