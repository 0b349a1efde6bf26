//! Density-guided feature gating.
//!
//! The density feature carries *where objects pile up*; this module uses it
//! to rescale the encoder's multi-scale maps before query selection. Per
//! level `i` (with `D_i` the density feature resized to that level's
//! extent and `S_i` the feature map):
//!
//! 1. a **spatial gate** `W_s = σ(conv7×7(concat[avgₚ(proj(D_i)),
//!    maxₚ(proj(D_i))]))` (channel pooling, `[1, h, w]`), applied as
//!    `E_i = W_s ⊗ S_i`;
//! 2. a **channel gate** `W_c = σ(mlp(avgₛ(E_i)) + mlp(maxₛ(E_i)))`
//!    (spatial pooling, `[d, 1, 1]`, shared two-layer MLP), applied as
//!    `F_i = W_c ⊗ E_i`.
//!
//! Both gates are strictly inside (0, 1), so enhancement never amplifies a
//! feature, only redistributes emphasis.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::init::{xavier, zeros, ParamVisitor};
use crate::pyramid::PyramidLevel;
use crate::tensor::{PoolKind, Tensor};

/// Parameters of the spatial and channel gates. One set is shared by all
/// pyramid levels (the gates are built from pooled statistics, so they are
/// extent-agnostic).
#[derive(Debug, Clone)]
pub struct FeatureGates {
    proj: (Tensor, Tensor),  // 1×1 conv on the density feature, d → d
    conv7: (Tensor, Tensor), // 7×7 conv, 2 pooled planes → 1 gate plane
    fc1: (Tensor, Tensor),   // shared MLP: d → d/r
    fc2: (Tensor, Tensor),   // shared MLP: d/r → d
}

impl FeatureGates {
    /// Initializes gates for `d`-channel maps with MLP bottleneck `d /
    /// reduction`.
    pub fn init(d: usize, reduction: usize, rng: &mut ChaCha8Rng) -> Result<FeatureGates> {
        if reduction == 0 || !d.is_multiple_of(reduction) {
            return Err(Error::Config(format!(
                "channel-gate reduction {reduction} must divide d={d}"
            )));
        }
        let hidden = d / reduction;
        Ok(FeatureGates {
            proj: (xavier(&[d, d, 1, 1], d, d, rng)?, zeros(&[d])?),
            conv7: (xavier(&[1, 2, 7, 7], 2 * 49, 49, rng)?, zeros(&[1])?),
            fc1: (xavier(&[hidden, d], d, hidden, rng)?, zeros(&[hidden])?),
            fc2: (xavier(&[d, hidden], hidden, d, rng)?, zeros(&[d])?),
        })
    }

    /// Spatial gate from the (resized) density feature: `[d,h,w] → [1,h,w]`,
    /// values in (0, 1).
    pub fn spatial_gate(&self, density: &Tensor) -> Result<Tensor> {
        let (d, h, w) = expect_map("spatial_gate", density)?;
        let x = density.reshape(&[1, d, h, w])?;
        let projected = x.conv2d(&self.proj.0, Some(&self.proj.1), 1, 0, 1)?;
        let avg = projected.pool_channel(PoolKind::Avg)?;
        let max = projected.pool_channel(PoolKind::Max)?;
        // Stack the two pooled planes as channels: [1,2,h,w].
        let stacked = Tensor::concat_rows(&[avg.reshape(&[1, h, w])?, max.reshape(&[1, h, w])?])?
            .reshape(&[1, 2, h, w])?;
        let gate = stacked
            .conv2d(&self.conv7.0, Some(&self.conv7.1), 1, 3, 1)?
            .sigmoid()?;
        gate.reshape(&[1, h, w])
    }

    /// Channel gate from a spatially gated map: `[d,h,w] → [d,1,1]`, values
    /// in (0, 1). The MLP is shared between the average- and max-pooled
    /// descriptors.
    pub fn channel_gate(&self, enhanced: &Tensor) -> Result<Tensor> {
        let (d, h, w) = expect_map("channel_gate", enhanced)?;
        let x = enhanced.reshape(&[1, d, h, w])?;
        let avg = x.pool_spatial(PoolKind::Avg)?.reshape(&[1, d])?;
        let max = x.pool_spatial(PoolKind::Max)?.reshape(&[1, d])?;
        let mlp = |v: &Tensor| -> Result<Tensor> {
            v.linear(&self.fc1.0, Some(&self.fc1.1))?
                .relu()?
                .linear(&self.fc2.0, Some(&self.fc2.1))
        };
        mlp(&avg)?.add(&mlp(&max)?)?.sigmoid()?.reshape(&[d, 1, 1])
    }

    /// Enhances one level: spatial gate, then channel gate.
    pub fn enhance_level(&self, map: &Tensor, density_at_level: &Tensor) -> Result<Tensor> {
        if map.shape() != density_at_level.shape() {
            return Err(Error::shape(
                "enhance_level",
                format!(
                    "map {:?} and density {:?} must share extents",
                    map.shape(),
                    density_at_level.shape()
                ),
            ));
        }
        let spatial = self.spatial_gate(density_at_level)?;
        let gated = map.mul_bcast_channel(&spatial)?;
        let channel = self.channel_gate(&gated)?;
        gated.mul_bcast_spatial(&channel)
    }

    /// Enhances every pyramid level, resizing the level-0 density feature
    /// to each level's extent (identity at level 0).
    pub fn enhance(&self, levels: &[PyramidLevel], density: &Tensor) -> Result<Vec<Tensor>> {
        if levels.is_empty() {
            return Err(Error::shape("enhance", "no levels given".to_string()));
        }
        if density.shape() != levels[0].map.shape() {
            return Err(Error::shape(
                "enhance",
                format!(
                    "density {:?} must match finest level {:?}",
                    density.shape(),
                    levels[0].map.shape()
                ),
            ));
        }
        let mut out = Vec::with_capacity(levels.len());
        for level in levels {
            let (_, h, w) = expect_map("enhance", &level.map)?;
            let density_i = density.bilinear_resize(h, w)?;
            out.push(self.enhance_level(&level.map, &density_i)?);
        }
        Ok(out)
    }
}

impl ParamVisitor for FeatureGates {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.proj.weight"), &mut self.proj.0);
        f(format!("{prefix}.proj.bias"), &mut self.proj.1);
        f(format!("{prefix}.conv7.weight"), &mut self.conv7.0);
        f(format!("{prefix}.conv7.bias"), &mut self.conv7.1);
        f(format!("{prefix}.mlp.fc1.weight"), &mut self.fc1.0);
        f(format!("{prefix}.mlp.fc1.bias"), &mut self.fc1.1);
        f(format!("{prefix}.mlp.fc2.weight"), &mut self.fc2.0);
        f(format!("{prefix}.mlp.fc2.bias"), &mut self.fc2.1);
    }
}

fn expect_map(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [d, h, w] => Ok((d, h, w)),
        ref other => Err(Error::shape(op, format!("expected [d,h,w], got {:?}", other))),
    }
}
