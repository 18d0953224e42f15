//! Named random streams derived from a single 64-bit seed.
//!
//! Every consumer of randomness asks for its own stream by name, so adding
//! draws in one component never shifts the draws seen by another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;

pub type Rng = ChaCha8Rng;

/// Deterministic stream for `(seed, name)`.
pub fn stream(seed: u64, name: &str) -> Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let digest: [u8; 32] = h.finalize().into();
    ChaCha8Rng::from_seed(digest)
}

/// Standard normal `[rows, cols]` matrix.
pub fn normal_matrix(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| StandardNormal.sample(rng))
        .collect();
    Tensor::matrix(rows, cols, data)
}

/// `n` draws from `U(0, 1)`.
pub fn uniform_vec(rng: &mut Rng, n: usize) -> Vec<f64> {
    use rand::Rng as _;
    (0..n).map(|_| rng.random::<f64>()).collect()
}
