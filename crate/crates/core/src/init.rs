//! Parameter initialization helpers shared by all model components.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::Tensor;

/// Xavier/Glorot uniform: `U(−a, a)` with `a = √(6/(fan_in + fan_out))`.
pub(crate) fn xavier(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..shape.iter().product::<usize>())
        .map(|_| rng.gen_range(-a..a))
        .collect();
    Tensor::param(shape, data)
}

/// Zero-initialized trainable tensor (biases, residual-branch outputs).
pub(crate) fn zeros(shape: &[usize]) -> Result<Tensor> {
    Tensor::param(shape, vec![0.0; shape.iter().product()])
}

/// Constant-initialized trainable tensor (layer-norm gains).
pub(crate) fn constant(shape: &[usize], value: f64) -> Result<Tensor> {
    Tensor::param(shape, vec![value; shape.iter().product()])
}

/// Visitor over a component's trainable tensors. Implementations must visit
/// parameters in a fixed order with stable, unique names — checkpoint
/// layout and optimizer state both key off the names.
pub trait ParamVisitor {
    /// Calls `f` once per parameter with its hierarchical name. The `&mut`
    /// slot lets callers swap in updated tensors (optimizer steps,
    /// checkpoint restore).
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor));
}

/// Convenience: collect `(name, tensor)` snapshots without mutating.
pub fn collect_params<T: ParamVisitor>(component: &mut T, prefix: &str) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    component.visit_params(prefix, &mut |name, t| out.push((name, t.clone())));
    out
}
