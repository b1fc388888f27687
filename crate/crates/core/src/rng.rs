//! Named, seedable random streams.
//!
//! A single master seed fans out to independent ChaCha streams so that each
//! consumer (data shuffle, step draws, noise draws, initialization, ...) can
//! be reproduced in isolation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Stream identifiers. The numeric value selects the ChaCha stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stream {
    Init = 1,
    Shuffle = 2,
    Steps = 3,
    TrainNoise = 4,
    Synthetic = 5,
    Sampling = 6,
}

pub type Rng = ChaCha8Rng;

/// Seeded generator for one named stream of a master seed.
pub fn stream(master_seed: u64, which: Stream) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(which as u64);
    rng
}

/// Generator for one sampling chain. Depends only on (seed, window, chain),
/// so results do not depend on how chains are scheduled across threads.
pub fn chain_stream(master_seed: u64, window: usize, chain: usize) -> Rng {
    let mixed = splitmix64(master_seed ^ splitmix64(window as u64 ^ 0x9e37_79b9_7f4a_7c15));
    let mut rng = ChaCha8Rng::seed_from_u64(mixed);
    rng.set_stream(((Stream::Sampling as u64) << 32) | chain as u64);
    rng
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn standard_normal_vec<R: rand::Rng + ?Sized>(rng: &mut R, len: usize) -> Vec<f64> {
    (0..len).map(|_| StandardNormal.sample(rng)).collect()
}
