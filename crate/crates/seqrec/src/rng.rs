//! Seed fan-out. One master seed is split into independent sub-seeds by
//! chaining splitmix64 over a list of stream tags:
//! `sub_seed(s, [a, b]) = mix(mix(s ^ a) ^ b)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream tags used by the pipeline stages.
pub mod stream {
    pub const PRETRAIN: u64 = 0x7072_6574;
    pub const AUGMENT: u64 = 0x6175_676d;
    pub const FINETUNE: u64 = 0x6669_6e65;
    pub const EVAL: u64 = 0x6576_616c;
    pub const INIT: u64 = 0x696e_6974;
    pub const SHUFFLE: u64 = 0x7368_7566;
    pub const NEGATIVES: u64 = 0x6e65_6773;
    pub const DROPOUT: u64 = 0x6472_6f70;
    pub const EXPORT: u64 = 0x6578_706f;
}

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn sub_seed(seed: u64, streams: &[u64]) -> u64 {
    streams.iter().fold(splitmix64(seed), |acc, &s| splitmix64(acc ^ s))
}

pub fn rng_for(seed: u64, streams: &[u64]) -> Rng {
    Rng::seed_from_u64(sub_seed(seed, streams))
}
