//! Seeded parameter initializers.

use rand::RngExt;
use rand_chacha::ChaCha8Rng;

use crate::numerics::{DType, Tensor};

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut Rng, shape: &[usize], bound: f64, dtype: DType) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::from_f64(shape, data, dtype).expect("finite init")
}

/// Uniform fan-in scaled init for a `[fan_in, fan_out]` matrix.
pub fn linear(rng: &mut Rng, fan_in: usize, fan_out: usize, dtype: DType) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    uniform(rng, &[fan_in, fan_out], bound, dtype)
}

pub fn full(shape: &[usize], v: f64, dtype: DType) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_f64(shape, vec![v; n], dtype).expect("finite init")
}
