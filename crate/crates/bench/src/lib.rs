//! Shared fixtures for the criterion benches.

use rand::Rng;
use simlab_core::net::EmbeddingBatch;
use simlab_core::rng;
use simlab_core::Tensor;

/// Uniform values in `[-1, 1)`.
pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng::seeded(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).expect("shape matches data")
}

/// `n` embeddings of width `dim` spread over `classes` labels.
pub fn labelled_embeddings(n: usize, dim: usize, classes: usize, seed: u64) -> EmbeddingBatch {
    let labels = (0..n).map(|i| i % classes).collect();
    EmbeddingBatch::new(random_tensor(&[n, dim], seed), labels).expect("labels match rows")
}
