//! Deterministic pseudo-random tensors for tests. A fixed LCG keeps the
//! tensor module's tests free of external RNG dependencies and stable
//! across runs.

use crate::error::Result;
use crate::tensor::Tensor;

/// Deterministic values in `[-1, 1)` from a 64-bit LCG.
pub(crate) fn pseudo_vec(seed: u64, n: usize) -> Vec<f64> {
    let mut state = seed.wrapping_mul(2862933555777941757).wrapping_add(3037000493);
    (0..n)
        .map(|_| {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((state >> 33) as f64 / (1u64 << 31) as f64) - 1.0
        })
        .collect()
}

/// Constant tensor with pseudo-random entries in `[-1, 1)`.
pub(crate) fn pseudo_tensor(seed: u64, shape: &[usize]) -> Tensor {
    Tensor::from_vec(shape, pseudo_vec(seed, shape.iter().product())).unwrap()
}

/// Constant tensor with entries in `[floor, floor + 1)`; useful for inputs
/// that must stay clear of kinks, zeros or log domains.
pub(crate) fn positive_tensor(seed: u64, shape: &[usize], floor: f64) -> Tensor {
    let data = pseudo_vec(seed, shape.iter().product())
        .into_iter()
        .map(|v| floor + (v + 1.0) / 2.0)
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Scalar objective that weights every output element differently, so a
/// finite-difference check exercises each output's contribution to the
/// gradient rather than just their sum.
pub(crate) fn weighted_sum(t: &Tensor, seed: u64) -> Result<Tensor> {
    let weights = Tensor::from_vec(t.shape(), pseudo_vec(seed, t.numel()))?;
    t.mul(&weights)?.sum_all()
}
