//! Seeding helpers. All randomness flows through `ChaCha12Rng` so that every
//! stage is reproducible from a single `u64` seed.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

/// Derive a sub-seed from a parent seed and a stream label. Splitmix64-style
/// mixing keeps distinct labels decorrelated.
pub fn derive_seed(parent: u64, label: u64) -> u64 {
    let mut z = parent
        .wrapping_add(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(label.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn rng_from(seed: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed)
}

pub fn normal_array(rng: &mut ChaCha12Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| {
        let v: f64 = StandardNormal.sample(rng);
        v * std
    })
}

/// Xavier/Glorot normal init for a weight of shape `out×in`.
pub fn xavier_array(rng: &mut ChaCha12Rng, out_dim: usize, in_dim: usize) -> Array2<f64> {
    let std = (2.0 / (out_dim + in_dim) as f64).sqrt();
    normal_array(rng, out_dim, in_dim, std)
}

pub fn uniform_index(rng: &mut ChaCha12Rng, n: usize) -> usize {
    rng.random_range(0..n)
}
