//! Bilinear resampling of `[c, h, w]` feature maps.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Sampling taps along one axis for bilinear interpolation with
/// half-pixel-centre alignment: source coordinate of output `i` is
/// `(i + 0.5)·(in/out) − 0.5`, clamped to the valid range.
fn taps(out: usize, input: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / out as f64;
    (0..out)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(input - 1);
            let frac = src - lo as f64;
            (lo, hi, frac)
        })
        .collect()
}

impl Tensor {
    /// Resamples `self: [c, h, w]` to `[c, out_h, out_w]` by bilinear
    /// interpolation. Resizing to the same extent is an exact identity.
    pub fn bilinear_resize(&self, out_h: usize, out_w: usize) -> Result<Tensor> {
        let (c, h, w) = match *self.shape() {
            [c, h, w] => (c, h, w),
            ref other => {
                return Err(Error::shape(
                    "bilinear_resize",
                    format!("expected [c,h,w] input, got {:?}", other),
                ))
            }
        };
        if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
            return Err(Error::shape(
                "bilinear_resize",
                format!("empty extent: {}x{} -> {}x{}", h, w, out_h, out_w),
            ));
        }
        let ty = taps(out_h, h);
        let tx = taps(out_w, w);
        let x = self.data();
        let mut out = vec![0.0; c * out_h * out_w];
        for ch in 0..c {
            let plane = &x[ch * h * w..(ch + 1) * h * w];
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let v00 = plane[y0 * w + x0];
                    let v01 = plane[y0 * w + x1];
                    let v10 = plane[y1 * w + x0];
                    let v11 = plane[y1 * w + x1];
                    let top = v00 + (v01 - v00) * fx;
                    let bot = v10 + (v11 - v10) * fx;
                    out[(ch * out_h + oy) * out_w + ox] = top + (bot - top) * fy;
                }
            }
        }
        Ok(Tensor::from_op(
            vec![c, out_h, out_w],
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let mut gx = vec![0.0; c * h * w];
                for ch in 0..c {
                    let gp = &mut gx[ch * h * w..(ch + 1) * h * w];
                    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                            let go = g[(ch * out_h + oy) * out_w + ox];
                            gp[y0 * w + x0] += go * (1.0 - fy) * (1.0 - fx);
                            gp[y0 * w + x1] += go * (1.0 - fy) * fx;
                            gp[y1 * w + x0] += go * fy * (1.0 - fx);
                            gp[y1 * w + x1] += go * fy * fx;
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }
}
