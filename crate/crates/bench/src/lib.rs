//! Seeded inputs shared by the benchmarks.

use physmamba_core::ssm::{discretize_zoh, SsmParams};
use physmamba_core::{ModelConfig, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape.to_vec(), &mut rng(seed))
}

/// Discretized time-invariant system `(Ā, B̄, C)` with `d` channels and `n` states.
pub fn lti_system(d: usize, n: usize, seed: u64) -> (Tensor, Tensor, Tensor) {
    let mut r = rng(seed);
    let a = Tensor::uniform([d, n], -2.0, -0.1, &mut r);
    let b = Tensor::randn([n], &mut r);
    let c = Tensor::randn([d, n], &mut r);
    let delta = Tensor::uniform([d], 0.01, 0.5, &mut r);
    let (abar, bbar) = discretize_zoh(&a, &b, &delta).expect("valid system");
    (abar, bbar, c)
}

pub fn selective_params(d: usize, n: usize, seed: u64) -> SsmParams {
    SsmParams::init(d, n, (d / 16).max(1), &mut rng(seed))
}

/// Batch-1 toy-model input.
pub fn toy_input(batch: usize) -> (ModelConfig, Tensor) {
    let m = ModelConfig::toy();
    let x = randn(&[batch, 3, m.frames, m.height, m.width], 5);
    (m, x)
}
