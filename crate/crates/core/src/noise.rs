//! Seeded standard-normal noise keyed by `(seed, stream)`.
//!
//! Each stream is an independent ChaCha8 stream, so a draw depends only on
//! its key and the element index, never on how many other draws happened
//! before it or on which thread made them.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::{ImageTensor, Shape};

/// Stream tags. The low 32 bits of a stream carry a step or sample index.
pub mod stream {
    pub const INITIAL: u64 = 1 << 32;
    pub const REVERSE: u64 = 2 << 32;
    pub const CALIBRATION: u64 = 3 << 32;
    pub const OPERATOR: u64 = 4 << 32;
    pub const SYNTHETIC: u64 = 5 << 32;
}

pub fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn standard_normal(seed: u64, stream: u64, shape: Shape) -> ImageTensor {
    let mut rng = rng(seed, stream);
    let data = (0..shape.len())
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    ImageTensor::from_vec(shape, data).expect("shape length matches")
}

pub fn normal_vec(seed: u64, stream: u64, len: usize) -> Vec<f64> {
    let mut rng = rng(seed, stream);
    (0..len).map(|_| StandardNormal.sample(&mut rng)).collect()
}
