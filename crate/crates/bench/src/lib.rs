//! Seeded inputs shared by the criterion benches.

use ddhf_core::rng::PrngState;
use ddhf_core::Tensor;

pub fn random_tensor(seed: u64, dims: &[usize], lo: f64, hi: f64) -> Tensor {
    let mut rng = PrngState::new(seed);
    let n = dims.iter().product();
    Tensor::new(dims.to_vec(), (0..n).map(|_| rng.uniform(lo, hi) as f32).collect()).unwrap()
}
