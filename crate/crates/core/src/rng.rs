//! Seed derivation. Every random stream in the crate is a ChaCha8 generator
//! seeded from a (base seed, stream tag, index) triple, so that independent
//! consumers never share state and results do not depend on call order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream tags.
pub(crate) mod stream {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const DROPOUT: u64 = 3;
    pub const HOLDOUT: u64 = 4;
    pub const DIRECTION: u64 = 5;
    pub const SUBSET: u64 = 6;
    pub const RANDOM_MASK: u64 = 7;
    pub const BLOBS: u64 = 8;
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    splitmix(splitmix(splitmix(base) ^ stream) ^ index)
}

pub fn stream_rng(base: u64, stream: u64, index: u64) -> Rng {
    Rng::seed_from_u64(derive_seed(base, stream, index))
}

/// Plain generator for callers that want to hand a seeded stream to `forward`.
pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}
