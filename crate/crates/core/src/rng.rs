//! Seeded random streams.
//!
//! Each consumer (initial latent, reference noise, weight init, ...) draws
//! from its own ChaCha stream derived from the run seed, so switching one
//! feature on or off never shifts the numbers another feature sees.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::tensor::Tensor;

/// Stream identifiers mixed into the run seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Weights = 1,
    InitialLatent = 2,
    ReferenceNoise = 3,
    ContentNoise = 4,
    RegionFill = 5,
    SdEdit = 6,
    Prompt = 7,
    FeatureNoise = 8,
}

pub fn stream(seed: u64, which: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}

pub fn normal(rng: &mut ChaCha8Rng, shape: impl Into<alloc::vec::Vec<usize>>) -> Tensor {
    Tensor::from_fn(shape, |_| rng.sample::<f64, _>(StandardNormal))
}

/// 64-bit FNV-1a, used to turn prompt words into seeds.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
