//! Scaled dot-product multi-head attention.
//!
//! Composed from the primitive ops (slice, matmul, softmax, concat), so its
//! gradient comes from their adjoints. Input/output projections live in the
//! encoder/decoder layers, not here.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Multi-head attention: per head `softmax(Q_h·K_hᵀ / √d_h)·V_h`, heads
/// concatenated back to `[n, d]`.
///
/// `queries: [n, d]`, `keys: [m, d]`, `values: [m, d]`; `d` must divide
/// evenly into `heads`.
pub fn attention(queries: &Tensor, keys: &Tensor, values: &Tensor, heads: usize) -> Result<Tensor> {
    let (_, d) = match *queries.shape() {
        [n, d] => (n, d),
        ref other => {
            return Err(Error::shape(
                "attention",
                format!("queries must be [n,d], got {:?}", other),
            ))
        }
    };
    let (m, dk) = match *keys.shape() {
        [m, dk] => (m, dk),
        ref other => {
            return Err(Error::shape(
                "attention",
                format!("keys must be [m,d], got {:?}", other),
            ))
        }
    };
    if values.shape() != [m, d] {
        return Err(Error::shape(
            "attention",
            format!(
                "values {:?} must match keys rows ({}) and model dim ({})",
                values.shape(),
                m,
                d
            ),
        ));
    }
    if dk != d {
        return Err(Error::shape(
            "attention",
            format!("key dim {} does not match query dim {}", dk, d),
        ));
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::shape(
            "attention",
            format!("model dim {} not divisible into {} heads", d, heads),
        ));
    }
    if m == 0 {
        return Err(Error::shape("attention", "no keys to attend over".to_string()));
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outputs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = queries.slice_cols(lo, hi)?;
        let kh = keys.slice_cols(lo, hi)?;
        let vh = values.slice_cols(lo, hi)?;
        let scores = qh.matmul(&kh.transpose2()?)?.mul_scalar(scale)?;
        let weights = scores.softmax_rows()?;
        outputs.push(weights.matmul(&vh)?);
    }
    Tensor::concat_cols(&outputs)
}
