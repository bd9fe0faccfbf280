//! Seeded random streams.
//!
//! Every run has one master seed. Each consumer draws from its own ChaCha8 stream: the
//! generator is seeded with the master seed and switched to the stream number of its
//! [`Stream`] (`set_stream`), so streams never overlap and adding draws to one stream cannot
//! perturb another.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type SeededRng = ChaCha8Rng;

/// Independent consumers of randomness within a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init = 0,
    Batching = 1,
    Noise = 2,
    Sampling = 3,
    Metrics = 4,
}

pub fn stream(master_seed: u64, stream: Stream) -> SeededRng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(stream as u64);
    rng
}

pub fn seeded(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stream keyed by a name, e.g. one per model parameter, so that each draw sequence depends
/// only on `(seed, name)`.
pub fn named(seed: u64, name: &str) -> SeededRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(name.as_bytes()));
    rng
}

pub fn standard_normal(rng: &mut impl Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.sample(StandardNormal)).collect()
}

/// 64-bit FNV-1a, used to derive per-name seeds.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}
