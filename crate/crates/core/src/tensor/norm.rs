//! Layer normalization over the feature axis of a `[n, d]` sequence.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

impl Tensor {
    /// Normalizes each row to zero mean / unit variance (biased variance,
    /// stabilized by `eps`), then applies the learned affine `gamma`/`beta`.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let (n, d) = match *self.shape() {
            [n, d] => (n, d),
            ref other => {
                return Err(Error::shape(
                    "layer_norm",
                    format!("expected [n,d] input, got {:?}", other),
                ))
            }
        };
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "gamma {:?} / beta {:?} do not match feature dim {}",
                    gamma.shape(),
                    beta.shape(),
                    d
                ),
            ));
        }
        if d == 0 {
            return Err(Error::shape("layer_norm", "feature dim is zero".to_string()));
        }
        if eps.is_nan() || eps <= 0.0 {
            return Err(Error::shape("layer_norm", format!("eps must be > 0, got {eps}")));
        }
        let x = self.data();
        let gm = gamma.data();
        let bt = beta.data();
        let mut out = vec![0.0; n * d];
        // Saved for backward: x̂ (normalized rows) and 1/σ̂ per row.
        let mut xhat = vec![0.0; n * d];
        let mut inv_std = vec![0.0; n];
        for i in 0..n {
            let row = &x[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[i] = inv;
            for j in 0..d {
                let xh = (row[j] - mean) * inv;
                xhat[i * d + j] = xh;
                out[i * d + j] = gm[j] * xh + bt[j];
            }
        }
        let xhat = Rc::new(xhat);
        let gmc = gamma.data_rc();
        Ok(Tensor::from_op(
            vec![n, d],
            out,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |g| {
                let mut gx = vec![0.0; n * d];
                let mut ggamma = vec![0.0; d];
                let mut gbeta = vec![0.0; d];
                for i in 0..n {
                    let gi = &g[i * d..(i + 1) * d];
                    let xh = &xhat[i * d..(i + 1) * d];
                    // h = γ ⊙ g; dx = (h − mean(h) − x̂·mean(h ⊙ x̂)) / σ̂
                    let mut mean_h = 0.0;
                    let mut mean_hx = 0.0;
                    for j in 0..d {
                        let h = gmc[j] * gi[j];
                        mean_h += h;
                        mean_hx += h * xh[j];
                        ggamma[j] += gi[j] * xh[j];
                        gbeta[j] += gi[j];
                    }
                    mean_h /= d as f64;
                    mean_hx /= d as f64;
                    for j in 0..d {
                        let h = gmc[j] * gi[j];
                        gx[i * d + j] = (h - mean_h - xh[j] * mean_hx) * inv_std[i];
                    }
                }
                vec![Some(gx), Some(ggamma), Some(gbeta)]
            }),
        ))
    }
}
