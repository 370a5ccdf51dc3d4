//! Seeded parameter initialization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ops::ConvSpec;
use crate::tensor::Tensor;

/// Deterministic source of uniform draws; the same seed always yields the
/// same sequence of tensors.
#[derive(Debug, Clone)]
pub struct Seeded {
    rng: ChaCha8Rng,
}

impl Seeded {
    pub fn new(seed: u64) -> Self {
        Seeded {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Tensor with elements drawn uniformly from `[-bound, bound]`.
    pub fn uniform(&mut self, dims: &[usize], bound: f64) -> Tensor {
        let n: usize = dims.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect();
        Tensor::new(dims, data).expect("finite uniform draws")
    }

    pub fn uniform_range(&mut self, dims: &[usize], lo: f64, hi: f64) -> Tensor {
        let n: usize = dims.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(lo..=hi)).collect();
        Tensor::new(dims, data).expect("finite uniform draws")
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.random()
    }

    /// Uniform in `[-1/√fan_in, 1/√fan_in]` weights and zero bias.
    pub fn conv(&mut self, out_ch: usize, in_ch: usize, k: usize, dilation: usize) -> ConvSpec {
        let bound = 1.0 / ((in_ch * k * k) as f64).sqrt();
        ConvSpec::new(
            self.uniform(&[out_ch, in_ch, k, k], bound),
            Tensor::zeros(&[out_ch]),
            dilation,
        )
        .expect("well-formed conv spec")
    }

    /// Permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.rng.random_range(0..=i);
            idx.swap(i, j);
        }
        idx
    }
}
