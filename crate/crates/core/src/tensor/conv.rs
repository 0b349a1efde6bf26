//! 2-D convolution (cross-correlation) with stride, zero padding and
//! dilation.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Output extent along one axis: `floor((in + 2·pad − dil·(k−1) − 1)/stride) + 1`.
fn conv_extent(input: usize, k: usize, stride: usize, pad: usize, dil: usize) -> Option<usize> {
    let span = dil * (k - 1) + 1;
    let padded = input + 2 * pad;
    if padded < span {
        return None;
    }
    Some((padded - span) / stride + 1)
}

impl Tensor {
    /// Convolves `self: [b, c_in, h, w]` with `weight: [c_out, c_in, kh, kw]`
    /// and an optional per-output-channel bias, producing
    /// `[b, c_out, h', w']`. Padding is zero-filled.
    pub fn conv2d(
        &self,
        weight: &Tensor,
        bias: Option<&Tensor>,
        stride: usize,
        padding: usize,
        dilation: usize,
    ) -> Result<Tensor> {
        let (b, c_in, h, w) = match *self.shape() {
            [b, c, h, w] => (b, c, h, w),
            ref other => {
                return Err(Error::shape(
                    "conv2d",
                    format!("expected [b,c,h,w] input, got {:?}", other),
                ))
            }
        };
        let (c_out, wc_in, kh, kw) = match *weight.shape() {
            [o, i, kh, kw] => (o, i, kh, kw),
            ref other => {
                return Err(Error::shape(
                    "conv2d",
                    format!("expected [c_out,c_in,kh,kw] weight, got {:?}", other),
                ))
            }
        };
        if wc_in != c_in {
            return Err(Error::shape(
                "conv2d",
                format!("input has {} channels, weight expects {}", c_in, wc_in),
            ));
        }
        if stride == 0 || dilation == 0 {
            return Err(Error::shape("conv2d", "stride and dilation must be ≥ 1".to_string()));
        }
        if kh == 0 || kw == 0 {
            return Err(Error::shape("conv2d", "kernel must be non-empty".to_string()));
        }
        if let Some(bias) = bias {
            if bias.shape() != [c_out] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias {:?} does not match c_out={}", bias.shape(), c_out),
                ));
            }
        }
        let (Some(oh), Some(ow)) = (
            conv_extent(h, kh, stride, padding, dilation),
            conv_extent(w, kw, stride, padding, dilation),
        ) else {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "kernel {}x{} (dilation {}) exceeds padded input {}x{}",
                    kh,
                    kw,
                    dilation,
                    h + 2 * padding,
                    w + 2 * padding
                ),
            ));
        };

        let x = self.data();
        let wt = weight.data();
        let mut out = vec![0.0; b * c_out * oh * ow];
        for ib in 0..b {
            for co in 0..c_out {
                let base_bias = bias.map_or(0.0, |t| t.data()[co]);
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = base_bias;
                        for ci in 0..c_in {
                            let x_plane = &x[(ib * c_in + ci) * h * w..];
                            let w_plane = &wt[(co * c_in + ci) * kh * kw..];
                            for ky in 0..kh {
                                let iy = (oy * stride + ky * dilation) as isize
                                    - padding as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let x_row = &x_plane[iy as usize * w..iy as usize * w + w];
                                let w_row = &w_plane[ky * kw..ky * kw + kw];
                                for (kx, &wv) in w_row.iter().enumerate() {
                                    let ixp = (ox * stride + kx * dilation) as isize
                                        - padding as isize;
                                    if ixp < 0 || ixp >= w as isize {
                                        continue;
                                    }
                                    acc += x_row[ixp as usize] * wv;
                                }
                            }
                        }
                        out[((ib * c_out + co) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }

        let xc = self.data_rc();
        let wc = weight.data_rc();
        let has_bias = bias.is_some();
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(bias) = bias {
            parents.push(bias.clone());
        }
        Ok(Tensor::from_op(
            vec![b, c_out, oh, ow],
            out,
            parents,
            Box::new(move |g| {
                let mut gx = vec![0.0; b * c_in * h * w];
                let mut gw = vec![0.0; c_out * c_in * kh * kw];
                let mut gb = vec![0.0; c_out];
                for ib in 0..b {
                    for co in 0..c_out {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let go = g[((ib * c_out + co) * oh + oy) * ow + ox];
                                if go == 0.0 {
                                    continue;
                                }
                                gb[co] += go;
                                for ci in 0..c_in {
                                    let x_off = (ib * c_in + ci) * h * w;
                                    let w_off = (co * c_in + ci) * kh * kw;
                                    for ky in 0..kh {
                                        let iy = (oy * stride + ky * dilation) as isize
                                            - padding as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        for kx in 0..kw {
                                            let ixp = (ox * stride + kx * dilation) as isize
                                                - padding as isize;
                                            if ixp < 0 || ixp >= w as isize {
                                                continue;
                                            }
                                            let xi = x_off + iy as usize * w + ixp as usize;
                                            let wi = w_off + ky * kw + kx;
                                            gx[xi] += go * wc[wi];
                                            gw[wi] += go * xc[xi];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                let mut grads = vec![Some(gx), Some(gw)];
                if has_bias {
                    grads.push(Some(gb));
                }
                grads
            }),
        ))
    }
}
