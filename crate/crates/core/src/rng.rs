//! Seeded, counter-based random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::scalar::Real;

/// Independent ChaCha stream identified by `(seed, stream)`.
pub fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stream id for the `index`-th draw of a given `purpose`.
pub fn stream_id(purpose: u32, outer: u32, index: u32) -> u64 {
    ((purpose as u64) << 48) ^ ((outer as u64) << 24) ^ index as u64
}

pub fn standard_normal_vec<T: Real, R: rand::Rng + ?Sized>(rng: &mut R, len: usize) -> Vec<T> {
    (0..len)
        .map(|_| {
            let x: f64 = StandardNormal.sample(rng);
            T::lit(x)
        })
        .collect()
}
