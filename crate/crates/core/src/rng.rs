//! Seeded random streams.
//!
//! Every random draw in the crate comes from ChaCha8 (`rand_chacha`), seeded
//! with `seed_from_u64(run_seed)` and then moved onto a fixed stream number per
//! consumer. Two consumers with the same run seed never share a keystream, and
//! adding a new consumer does not perturb the existing ones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type RunRng = ChaCha8Rng;

/// Name and version of the generator, recorded in run outputs.
pub const GENERATOR: &str = "chacha8/rand_chacha-0.9/v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    InitialPool = 1,
    RandomSelect = 2,
    TrainData = 3,
    EvalData = 4,
    Bench = 5,
    Instances = 6,
}

pub fn stream_rng(seed: u64, stream: Stream) -> RunRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// SplitMix64 mixing step, used to derive per-iteration seeds.
pub fn derive_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed
        .wrapping_add(salt.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
