//! Channel-wise and global spatial pooling.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Pooling reduction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    /// Arithmetic mean over the pooled axis.
    Avg,
    /// Maximum over the pooled axis. Gradient routes to the first maximal
    /// element (deterministic on ties).
    Max,
}

fn shape4(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [b, c, h, w] => Ok((b, c, h, w)),
        ref other => Err(Error::shape(op, format!("expected [b,c,h,w], got {:?}", other))),
    }
}

impl Tensor {
    /// Pools across the channel axis: `[b,c,h,w] → [b,1,h,w]`.
    pub fn pool_channel(&self, kind: PoolKind) -> Result<Tensor> {
        let (b, c, h, w) = shape4("pool_channel", self)?;
        if c == 0 {
            return Err(Error::shape("pool_channel", "zero channels".to_string()));
        }
        let hw = h * w;
        let x = self.data();
        let mut out = vec![0.0; b * hw];
        // For max pooling, remember which channel won each position.
        let mut argmax = vec![0usize; if kind == PoolKind::Max { b * hw } else { 0 }];
        for ib in 0..b {
            for p in 0..hw {
                match kind {
                    PoolKind::Avg => {
                        let mut acc = 0.0;
                        for ch in 0..c {
                            acc += x[(ib * c + ch) * hw + p];
                        }
                        out[ib * hw + p] = acc / c as f64;
                    }
                    PoolKind::Max => {
                        let mut best = x[ib * c * hw + p];
                        let mut best_ch = 0;
                        for ch in 1..c {
                            let v = x[(ib * c + ch) * hw + p];
                            if v > best {
                                best = v;
                                best_ch = ch;
                            }
                        }
                        out[ib * hw + p] = best;
                        argmax[ib * hw + p] = best_ch;
                    }
                }
            }
        }
        Ok(Tensor::from_op(
            vec![b, 1, h, w],
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let mut gx = vec![0.0; b * c * hw];
                for ib in 0..b {
                    for p in 0..hw {
                        let go = g[ib * hw + p];
                        match kind {
                            PoolKind::Avg => {
                                let share = go / c as f64;
                                for ch in 0..c {
                                    gx[(ib * c + ch) * hw + p] += share;
                                }
                            }
                            PoolKind::Max => {
                                gx[(ib * c + argmax[ib * hw + p]) * hw + p] += go;
                            }
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Pools over all spatial positions: `[b,c,h,w] → [b,c,1,1]`.
    pub fn pool_spatial(&self, kind: PoolKind) -> Result<Tensor> {
        let (b, c, h, w) = shape4("pool_spatial", self)?;
        let hw = h * w;
        if hw == 0 {
            return Err(Error::shape("pool_spatial", "empty spatial extent".to_string()));
        }
        let x = self.data();
        let mut out = vec![0.0; b * c];
        let mut argmax = vec![0usize; if kind == PoolKind::Max { b * c } else { 0 }];
        for bc in 0..b * c {
            let plane = &x[bc * hw..(bc + 1) * hw];
            match kind {
                PoolKind::Avg => out[bc] = plane.iter().sum::<f64>() / hw as f64,
                PoolKind::Max => {
                    let (mut best, mut best_p) = (plane[0], 0);
                    for (p, &v) in plane.iter().enumerate().skip(1) {
                        if v > best {
                            best = v;
                            best_p = p;
                        }
                    }
                    out[bc] = best;
                    argmax[bc] = best_p;
                }
            }
        }
        Ok(Tensor::from_op(
            vec![b, c, 1, 1],
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let mut gx = vec![0.0; b * c * hw];
                for bc in 0..b * c {
                    match kind {
                        PoolKind::Avg => {
                            let share = g[bc] / hw as f64;
                            for p in 0..hw {
                                gx[bc * hw + p] += share;
                            }
                        }
                        PoolKind::Max => gx[bc * hw + argmax[bc]] += g[bc],
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }
}
