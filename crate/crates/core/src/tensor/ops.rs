//! Elementwise, reduction, shape and linear-algebra ops with hand-written
//! adjoints.
//!
//! Conventions:
//!
//! * every op validates shapes up front and fails with [`Error::Shape`];
//! * binary elementwise ops require identical shapes (no implicit
//!   broadcasting — the two explicit broadcast ops cover the model's needs);
//! * subgradient choices at kinks are documented per op and deterministic.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn check_same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("operands differ: {:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn check_rank2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [n, m] => Ok((*n, *m)),
        other => Err(Error::shape(op, format!("expected rank-2 tensor, got {:?}", other))),
    }
}

impl Tensor {
    /// Elementwise sum of two same-shape tensors.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        check_same_shape("add", self, other)?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a + b).collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|g| vec![Some(g.to_vec()), Some(g.to_vec())]),
        ))
    }

    /// Elementwise difference `self - other`.
    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        check_same_shape("sub", self, other)?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a - b).collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|g| {
                vec![
                    Some(g.to_vec()),
                    Some(g.iter().map(|v| -v).collect()),
                ]
            }),
        ))
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        check_same_shape("mul", self, other)?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a * b).collect();
        let a = self.data_rc();
        let b = other.data_rc();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                vec![
                    Some(g.iter().zip(b.iter()).map(|(g, b)| g * b).collect()),
                    Some(g.iter().zip(a.iter()).map(|(g, a)| g * a).collect()),
                ]
            }),
        ))
    }

    /// Elementwise quotient `self / other`. The caller guarantees nonzero
    /// denominators; zeros propagate as infinities.
    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        check_same_shape("div", self, other)?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a / b).collect();
        let a = self.data_rc();
        let b = other.data_rc();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                vec![
                    Some(g.iter().zip(b.iter()).map(|(g, b)| g / b).collect()),
                    Some(
                        g.iter()
                            .zip(a.iter().zip(b.iter()))
                            .map(|(g, (a, b))| -g * a / (b * b))
                            .collect(),
                    ),
                ]
            }),
        ))
    }

    /// Elementwise negation.
    pub fn neg(&self) -> Result<Tensor> {
        let data = self.data().iter().map(|v| -v).collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|g| vec![Some(g.iter().map(|v| -v).collect())]),
        ))
    }

    /// Elementwise absolute value. Subgradient at 0 is 0.
    pub fn abs(&self) -> Result<Tensor> {
        let data = self.data().iter().map(|v| v.abs()).collect();
        let x = self.data_rc();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g| {
                vec![Some(
                    g.iter()
                        .zip(x.iter())
                        .map(|(g, x)| {
                            if *x > 0.0 {
                                *g
                            } else if *x < 0.0 {
                                -g
                            } else {
                                0.0
                            }
                        })
                        .collect(),
                )]
            }),
        ))
    }

    /// Elementwise maximum. On ties the gradient routes to `self`.
    pub fn maximum(&self, other: &Tensor) -> Result<Tensor> {
        check_same_shape("maximum", self, other)?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a.max(*b))
            .collect();
        let a = self.data_rc();
        let b = other.data_rc();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                let mut ga = vec![0.0; g.len()];
                let mut gb = vec![0.0; g.len()];
                for i in 0..g.len() {
                    if a[i] >= b[i] {
                        ga[i] = g[i];
                    } else {
                        gb[i] = g[i];
                    }
                }
                vec![Some(ga), Some(gb)]
            }),
        ))
    }

    /// Elementwise minimum. On ties the gradient routes to `self`.
    pub fn minimum(&self, other: &Tensor) -> Result<Tensor> {
        check_same_shape("minimum", self, other)?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a.min(*b))
            .collect();
        let a = self.data_rc();
        let b = other.data_rc();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                let mut ga = vec![0.0; g.len()];
                let mut gb = vec![0.0; g.len()];
                for i in 0..g.len() {
                    if a[i] <= b[i] {
                        ga[i] = g[i];
                    } else {
                        gb[i] = g[i];
                    }
                }
                vec![Some(ga), Some(gb)]
            }),
        ))
    }

    /// Adds a scalar to every element.
    pub fn add_scalar(&self, c: f64) -> Result<Tensor> {
        let data = self.data().iter().map(|v| v + c).collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|g| vec![Some(g.to_vec())]),
        ))
    }

    /// Multiplies every element by a scalar.
    pub fn mul_scalar(&self, c: f64) -> Result<Tensor> {
        let data = self.data().iter().map(|v| v * c).collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g| vec![Some(g.iter().map(|v| v * c).collect())]),
        ))
    }

    /// Rectified linear unit. Subgradient at 0 is 0.
    pub fn relu(&self) -> Result<Tensor> {
        let data = self.data().iter().map(|v| v.max(0.0)).collect();
        let x = self.data_rc();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g| {
                vec![Some(
                    g.iter()
                        .zip(x.iter())
                        .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                        .collect(),
                )]
            }),
        ))
    }

    /// Elementwise logistic sigmoid.
    pub fn sigmoid(&self) -> Result<Tensor> {
        let out = Rc::new(
            self.data()
                .iter()
                .map(|&v| sigmoid_scalar(v))
                .collect::<Vec<f64>>(),
        );
        let s = Rc::clone(&out);
        Ok(Tensor::from_op_shared(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g| {
                vec![Some(
                    g.iter()
                        .zip(s.iter())
                        .map(|(g, s)| g * s * (1.0 - s))
                        .collect(),
                )]
            }),
        ))
    }

    /// Elementwise exponential.
    pub fn exp(&self) -> Result<Tensor> {
        let out = Rc::new(self.data().iter().map(|v| v.exp()).collect::<Vec<f64>>());
        let e = Rc::clone(&out);
        Ok(Tensor::from_op_shared(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g| {
                vec![Some(g.iter().zip(e.iter()).map(|(g, e)| g * e).collect())]
            }),
        ))
    }

    /// Elementwise natural logarithm. The caller guarantees positive inputs;
    /// non-positive values propagate as NaN/−∞ and are caught by the
    /// training loop's finiteness checks.
    pub fn ln(&self) -> Result<Tensor> {
        let data = self.data().iter().map(|v| v.ln()).collect();
        let x = self.data_rc();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g| vec![Some(g.iter().zip(x.iter()).map(|(g, x)| g / x).collect())]),
        ))
    }

    /// Numerically stable `ln(1 + e^x)`; the adjoint is `sigmoid(x)`.
    pub fn softplus(&self) -> Result<Tensor> {
        let data = self
            .data()
            .iter()
            .map(|&v| if v > 0.0 { v + (-v).exp().ln_1p() } else { v.exp().ln_1p() })
            .collect();
        let x = self.data_rc();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g| {
                vec![Some(
                    g.iter()
                        .zip(x.iter())
                        .map(|(g, &x)| g * sigmoid_scalar(x))
                        .collect(),
                )]
            }),
        ))
    }

    /// Elementwise power with constant exponent. Intended for non-negative
    /// bases (probabilities); the `p == 0` case is defined as constant 1
    /// with zero gradient.
    pub fn powf(&self, p: f64) -> Result<Tensor> {
        let data = self.data().iter().map(|v| v.powf(p)).collect();
        let x = self.data_rc();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g| {
                if p == 0.0 {
                    return vec![Some(vec![0.0; g.len()])];
                }
                vec![Some(
                    g.iter()
                        .zip(x.iter())
                        .map(|(g, x)| g * p * x.powf(p - 1.0))
                        .collect(),
                )]
            }),
        ))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum_all(&self) -> Result<Tensor> {
        let sum = self.data().iter().sum();
        let n = self.numel();
        Ok(Tensor::from_op(
            vec![1],
            vec![sum],
            vec![self.clone()],
            Box::new(move |g| vec![Some(vec![g[0]; n])]),
        ))
    }

    /// Mean of all elements, as a scalar.
    pub fn mean_all(&self) -> Result<Tensor> {
        if self.numel() == 0 {
            return Err(Error::shape("mean_all", "tensor has no elements".to_string()));
        }
        let n = self.numel();
        let mean = self.data().iter().sum::<f64>() / n as f64;
        Ok(Tensor::from_op(
            vec![1],
            vec![mean],
            vec![self.clone()],
            Box::new(move |g| vec![Some(vec![g[0] / n as f64; n])]),
        ))
    }

    /// Reinterprets the buffer under a new shape with the same element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::shape(
                "reshape",
                format!("cannot reshape {:?} into {:?}", self.shape(), shape),
            ));
        }
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.data().to_vec(),
            vec![self.clone()],
            Box::new(|g| vec![Some(g.to_vec())]),
        ))
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose2(&self) -> Result<Tensor> {
        let (n, m) = check_rank2("transpose2", self)?;
        let x = self.data();
        let mut data = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                data[j * n + i] = x[i * m + j];
            }
        }
        Ok(Tensor::from_op(
            vec![m, n],
            data,
            vec![self.clone()],
            Box::new(move |g| {
                let mut gx = vec![0.0; n * m];
                for j in 0..m {
                    for i in 0..n {
                        gx[i * m + j] = g[j * n + i];
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Concatenates tensors along axis 0. All trailing dimensions must match.
    pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::shape("concat_rows", "no tensors given".to_string()));
        }
        let tail = &parts[0].shape()[1..];
        for p in parts {
            if p.shape().is_empty() || &p.shape()[1..] != tail {
                return Err(Error::shape(
                    "concat_rows",
                    format!("trailing dims differ: {:?} vs {:?}", parts[0].shape(), p.shape()),
                ));
            }
        }
        let rows: usize = parts.iter().map(|p| p.shape()[0]).sum();
        let mut shape = vec![rows];
        shape.extend_from_slice(tail);
        let mut data = Vec::with_capacity(shape.iter().product());
        for p in parts {
            data.extend_from_slice(p.data());
        }
        let sizes: Vec<usize> = parts.iter().map(Tensor::numel).collect();
        Ok(Tensor::from_op(
            shape,
            data,
            parts.to_vec(),
            Box::new(move |g| {
                let mut out = Vec::with_capacity(sizes.len());
                let mut offset = 0;
                for &size in &sizes {
                    out.push(Some(g[offset..offset + size].to_vec()));
                    offset += size;
                }
                out
            }),
        ))
    }

    /// Concatenates rank-2 tensors along axis 1 (columns). Row counts must
    /// match.
    pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::shape("concat_cols", "no tensors given".to_string()));
        }
        let (n, _) = check_rank2("concat_cols", &parts[0])?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (rows, cols) = check_rank2("concat_cols", p)?;
            if rows != n {
                return Err(Error::shape(
                    "concat_cols",
                    format!("row counts differ: {} vs {}", n, rows),
                ));
            }
            widths.push(cols);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; n * total];
        let mut col0 = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            let src = p.data();
            for i in 0..n {
                data[i * total + col0..i * total + col0 + w]
                    .copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            col0 += w;
        }
        let widths_b = widths.clone();
        Ok(Tensor::from_op(
            vec![n, total],
            data,
            parts.to_vec(),
            Box::new(move |g| {
                let mut out = Vec::with_capacity(widths_b.len());
                let mut col0 = 0;
                for &w in &widths_b {
                    let mut gp = vec![0.0; n * w];
                    for i in 0..n {
                        gp[i * w..(i + 1) * w]
                            .copy_from_slice(&g[i * total + col0..i * total + col0 + w]);
                    }
                    out.push(Some(gp));
                    col0 += w;
                }
                out
            }),
        ))
    }

    /// Column slice `[start, end)` of a rank-2 tensor.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Tensor> {
        let (n, m) = check_rank2("slice_cols", self)?;
        if start >= end || end > m {
            return Err(Error::shape(
                "slice_cols",
                format!("range {}..{} invalid for {} columns", start, end, m),
            ));
        }
        let w = end - start;
        let src = self.data();
        let mut data = vec![0.0; n * w];
        for i in 0..n {
            data[i * w..(i + 1) * w].copy_from_slice(&src[i * m + start..i * m + end]);
        }
        Ok(Tensor::from_op(
            vec![n, w],
            data,
            vec![self.clone()],
            Box::new(move |g| {
                let mut gx = vec![0.0; n * m];
                for i in 0..n {
                    gx[i * m + start..i * m + end].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Selects rows of a rank-2 tensor by index (repetition allowed). The
    /// adjoint scatter-adds back, so repeated rows accumulate gradient.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor> {
        let (n, m) = check_rank2("gather_rows", self)?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::shape(
                "gather_rows",
                format!("row index {} out of bounds for {} rows", bad, n),
            ));
        }
        let src = self.data();
        let k = indices.len();
        let mut data = vec![0.0; k * m];
        for (r, &i) in indices.iter().enumerate() {
            data[r * m..(r + 1) * m].copy_from_slice(&src[i * m..(i + 1) * m]);
        }
        let idx = indices.to_vec();
        Ok(Tensor::from_op(
            vec![k, m],
            data,
            vec![self.clone()],
            Box::new(move |g| {
                let mut gx = vec![0.0; n * m];
                for (r, &i) in idx.iter().enumerate() {
                    for c in 0..m {
                        gx[i * m + c] += g[r * m + c];
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Matrix product of `[n,k] × [k,m] → [n,m]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (n, k) = check_rank2("matmul", self)?;
        let (k2, m) = check_rank2("matmul", other)?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner dims differ: {:?} × {:?}", self.shape(), other.shape()),
            ));
        }
        let data = matmul_raw(self.data(), other.data(), n, k, m);
        let a = self.data_rc();
        let b = other.data_rc();
        Ok(Tensor::from_op(
            vec![n, m],
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                // dA = G · Bᵀ ; dB = Aᵀ · G
                let ga = matmul_raw_nt(g, &b, n, m, k);
                let gb = matmul_raw_tn(&a, g, k, n, m);
                vec![Some(ga), Some(gb)]
            }),
        ))
    }

    /// Affine map `x · Wᵀ + b` with `W: [d_out, d_in]`.
    ///
    /// Accepts input of any rank ≥ 1 whose last dimension is `d_in`; leading
    /// dimensions are treated as a batch and preserved.
    pub fn linear(&self, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let (d_out, d_in) = check_rank2("linear", weight)?;
        let in_shape = self.shape();
        if in_shape.is_empty() || in_shape[in_shape.len() - 1] != d_in {
            return Err(Error::shape(
                "linear",
                format!("input {:?} does not end in d_in={}", in_shape, d_in),
            ));
        }
        if let Some(b) = bias {
            if b.shape() != [d_out] {
                return Err(Error::shape(
                    "linear",
                    format!("bias {:?} does not match d_out={}", b.shape(), d_out),
                ));
            }
        }
        let rows = self.numel() / d_in;
        let x = self.data();
        let w = weight.data();
        let mut data = vec![0.0; rows * d_out];
        for i in 0..rows {
            let xi = &x[i * d_in..(i + 1) * d_in];
            let out = &mut data[i * d_out..(i + 1) * d_out];
            for (o, wo) in out.iter_mut().zip(w.chunks_exact(d_in)) {
                *o = dot(xi, wo);
            }
            if let Some(b) = bias {
                for (o, b) in out.iter_mut().zip(b.data()) {
                    *o += b;
                }
            }
        }
        let mut out_shape = in_shape.to_vec();
        *out_shape.last_mut().unwrap() = d_out;

        let xc = self.data_rc();
        let wc = weight.data_rc();
        let has_bias = bias.is_some();
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        Ok(Tensor::from_op(
            out_shape,
            data,
            parents,
            Box::new(move |g| {
                // dX = G · W ; dW = Gᵀ · X ; db = column sums of G.
                let gx = matmul_raw(g, &wc, rows, d_out, d_in);
                let gw = matmul_raw_tn(g, &xc, d_out, rows, d_in);
                let mut grads = vec![Some(gx), Some(gw)];
                if has_bias {
                    let mut gb = vec![0.0; d_out];
                    for row in g.chunks_exact(d_out) {
                        for (acc, v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    grads.push(Some(gb));
                }
                grads
            }),
        ))
    }

    /// Multiplies a `[c,h,w]` tensor by a `[1,h,w]` gate, broadcasting the
    /// gate across channels.
    pub fn mul_bcast_channel(&self, gate: &Tensor) -> Result<Tensor> {
        let (c, h, w) = match self.shape() {
            [c, h, w] => (*c, *h, *w),
            other => {
                return Err(Error::shape(
                    "mul_bcast_channel",
                    format!("expected [c,h,w] input, got {:?}", other),
                ))
            }
        };
        if gate.shape() != [1, h, w] {
            return Err(Error::shape(
                "mul_bcast_channel",
                format!("gate {:?} does not match [1,{},{}]", gate.shape(), h, w),
            ));
        }
        let hw = h * w;
        let x = self.data();
        let gt = gate.data();
        let mut data = vec![0.0; c * hw];
        for ch in 0..c {
            for p in 0..hw {
                data[ch * hw + p] = x[ch * hw + p] * gt[p];
            }
        }
        let xc = self.data_rc();
        let gc = gate.data_rc();
        Ok(Tensor::from_op(
            vec![c, h, w],
            data,
            vec![self.clone(), gate.clone()],
            Box::new(move |g| {
                let mut gx = vec![0.0; c * hw];
                let mut ggate = vec![0.0; hw];
                for ch in 0..c {
                    for p in 0..hw {
                        gx[ch * hw + p] = g[ch * hw + p] * gc[p];
                        ggate[p] += g[ch * hw + p] * xc[ch * hw + p];
                    }
                }
                vec![Some(gx), Some(ggate)]
            }),
        ))
    }

    /// Multiplies a `[c,h,w]` tensor by a per-channel gate of shape `[c]`
    /// or `[c,1,1]`, broadcasting the gate across spatial positions.
    pub fn mul_bcast_spatial(&self, gate: &Tensor) -> Result<Tensor> {
        let (c, h, w) = match self.shape() {
            [c, h, w] => (*c, *h, *w),
            other => {
                return Err(Error::shape(
                    "mul_bcast_spatial",
                    format!("expected [c,h,w] input, got {:?}", other),
                ))
            }
        };
        let gate_ok = gate.shape() == [c] || gate.shape() == [c, 1, 1];
        if !gate_ok {
            return Err(Error::shape(
                "mul_bcast_spatial",
                format!("gate {:?} does not match [{c}] or [{c},1,1]", gate.shape()),
            ));
        }
        let hw = h * w;
        let x = self.data();
        let gt = gate.data();
        let mut data = vec![0.0; c * hw];
        for ch in 0..c {
            for p in 0..hw {
                data[ch * hw + p] = x[ch * hw + p] * gt[ch];
            }
        }
        let xc = self.data_rc();
        let gc = gate.data_rc();
        Ok(Tensor::from_op(
            vec![c, h, w],
            data,
            vec![self.clone(), gate.clone()],
            Box::new(move |g| {
                let mut gx = vec![0.0; c * hw];
                let mut ggate = vec![0.0; c];
                for ch in 0..c {
                    for p in 0..hw {
                        gx[ch * hw + p] = g[ch * hw + p] * gc[ch];
                        ggate[ch] += g[ch * hw + p] * xc[ch * hw + p];
                    }
                }
                vec![Some(gx), Some(ggate)]
            }),
        ))
    }

    /// Row-wise softmax of a rank-2 tensor, numerically stabilized by the
    /// row maximum. Rows sum to 1 exactly up to rounding.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        let (n, m) = check_rank2("softmax_rows", self)?;
        if m == 0 {
            return Err(Error::shape("softmax_rows", "rows are empty".to_string()));
        }
        let x = self.data();
        let mut data = vec![0.0; n * m];
        for i in 0..n {
            let row = &x[i * m..(i + 1) * m];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let out = &mut data[i * m..(i + 1) * m];
            let mut sum = 0.0;
            for (o, &v) in out.iter_mut().zip(row) {
                *o = (v - max).exp();
                sum += *o;
            }
            for o in out.iter_mut() {
                *o /= sum;
            }
        }
        let out = Rc::new(data);
        let s = Rc::clone(&out);
        Ok(Tensor::from_op_shared(
            vec![n, m],
            out,
            vec![self.clone()],
            Box::new(move |g| {
                // dx_j = s_j (g_j − Σ_k g_k s_k), per row.
                let mut gx = vec![0.0; n * m];
                for i in 0..n {
                    let si = &s[i * m..(i + 1) * m];
                    let gi = &g[i * m..(i + 1) * m];
                    let inner: f64 = si.iter().zip(gi).map(|(s, g)| s * g).sum();
                    for j in 0..m {
                        gx[i * m + j] = si[j] * (gi[j] - inner);
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(a, b)| a * b).sum()
}

/// `C = A·B` for row-major `A: [n,k]`, `B: [k,m]`. The i-k-j loop order
/// streams both B and C rows, which the compiler vectorizes well.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * m];
    for i in 0..n {
        let ci = &mut c[i * m..(i + 1) * m];
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik == 0.0 {
                continue;
            }
            let bk = &b[kk * m..(kk + 1) * m];
            for (cv, bv) in ci.iter_mut().zip(bk) {
                *cv += aik * bv;
            }
        }
    }
    c
}

/// `C = A·Bᵀ` for row-major `A: [n,k]`, `B: [m,k]`.
pub(crate) fn matmul_raw_nt(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * m];
    for i in 0..n {
        let ai = &a[i * k..(i + 1) * k];
        for j in 0..m {
            c[i * m + j] = dot(ai, &b[j * k..(j + 1) * k]);
        }
    }
    c
}

/// `C = Aᵀ·B` for row-major `A: [k,n]`, `B: [k,m]` (result `[n,m]`).
pub(crate) fn matmul_raw_tn(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * m];
    for kk in 0..k {
        let bk = &b[kk * m..(kk + 1) * m];
        for i in 0..n {
            let aki = a[kk * n + i];
            if aki == 0.0 {
                continue;
            }
            let ci = &mut c[i * m..(i + 1) * m];
            for (cv, bv) in ci.iter_mut().zip(bk) {
                *cv += aki * bv;
            }
        }
    }
    c
}
