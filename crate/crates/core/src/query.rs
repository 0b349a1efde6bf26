//! Position scoring, top-k selection and anchor construction for a
//! dynamically sized query set.
//!
//! Every flat encoder position is scored per class; the top `k` positions
//! (with `k` chosen by the predicted count level's budget) seed decoder
//! queries. Each query gets a content vector projected from its encoder
//! feature and an anchor box: a level-dependent prior refined by a small
//! FFN in inverse-sigmoid space, so anchors always stay inside the unit
//! square. The same weights serve every `k` — budgets only change how many
//! positions are kept.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::counting::{CountLevel, QueryBudget};
use crate::error::{Error, Result};
use crate::init::{xavier, zeros, ParamVisitor};
use crate::pyramid::FlattenedFeatures;
use crate::tensor::Tensor;

/// Axis-aligned box in normalized center form; all components in (0, 1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnchorBox {
    /// Center x, fraction of image width.
    pub cx: f64,
    /// Center y, fraction of image height.
    pub cy: f64,
    /// Width fraction.
    pub w: f64,
    /// Height fraction.
    pub h: f64,
}

impl AnchorBox {
    /// True when every component lies strictly inside (0, 1).
    pub fn is_valid(&self) -> bool {
        [self.cx, self.cy, self.w, self.h]
            .iter()
            .all(|v| v.is_finite() && *v > 0.0 && *v < 1.0)
    }
}

/// Inverse sigmoid with the argument clamped away from {0, 1}.
pub(crate) fn inverse_sigmoid(p: f64) -> f64 {
    let p = p.clamp(1e-6, 1.0 - 1e-6);
    (p / (1.0 - p)).ln()
}

/// A selected query set plus the dense score map it came from.
#[derive(Debug, Clone)]
pub struct QuerySet {
    /// Content vectors, `[k, d]`.
    pub content: Tensor,
    /// Anchor boxes as a `[k, 4]` tensor `(cx, cy, w, h)`, kept in the
    /// graph so box losses reach the refinement FFN.
    pub anchors: Tensor,
    /// The same anchors in inverse-sigmoid space, `[k, 4]`. Decoder layers
    /// refine boxes additively in this space; starting from the attached
    /// logits lets the first refinement's loss reach the selection FFN.
    pub anchor_logits: Tensor,
    /// Anchor boxes as plain values (same data as `anchors`).
    pub boxes: Vec<AnchorBox>,
    /// Originating `(level, y, x)` per query; no duplicates.
    pub provenance: Vec<(usize, usize, usize)>,
    /// Flat encoder positions selected, ascending. Selection is a set —
    /// which positions got in is decided by score, but the stored order is
    /// canonical (by position) so that near-tied scores cannot reorder
    /// queries between otherwise identical passes.
    pub selected: Vec<usize>,
    /// Dense per-position class scores `[total, num_classes]` (logits),
    /// used for selection supervision.
    pub scores: Tensor,
}

impl QuerySet {
    /// Number of queries.
    pub fn len(&self) -> usize {
        self.provenance.len()
    }

    /// True when the set is empty (never produced by selection, which
    /// requires `k ≥ 1`).
    pub fn is_empty(&self) -> bool {
        self.provenance.is_empty()
    }
}

/// Scoring, content-projection and anchor-refinement parameters.
#[derive(Debug, Clone)]
pub struct SelectionHead {
    score_fc1: (Tensor, Tensor), // d → d
    score_fc2: (Tensor, Tensor), // d → num_classes
    content: (Tensor, Tensor),   // d → d
    refine_fc1: (Tensor, Tensor), // d → d
    refine_fc2: (Tensor, Tensor), // d → 4, zero-initialized
}

impl SelectionHead {
    /// Initializes for `d`-dim features and `num_classes` object classes.
    /// The anchor-refinement output layer starts at zero, so fresh models
    /// propose exactly the anchor priors.
    pub fn init(d: usize, num_classes: usize, rng: &mut ChaCha8Rng) -> Result<SelectionHead> {
        if num_classes == 0 {
            return Err(Error::Config("need at least one object class".to_string()));
        }
        Ok(SelectionHead {
            score_fc1: (xavier(&[d, d], d, d, rng)?, zeros(&[d])?),
            score_fc2: (xavier(&[num_classes, d], d, num_classes, rng)?, zeros(&[num_classes])?),
            content: (xavier(&[d, d], d, d, rng)?, zeros(&[d])?),
            refine_fc1: (xavier(&[d, d], d, d, rng)?, zeros(&[d])?),
            refine_fc2: (zeros(&[4, d])?, zeros(&[4])?),
        })
    }

    /// Number of classes scored.
    pub fn num_classes(&self) -> usize {
        self.score_fc2.0.shape()[0]
    }

    /// Scores every flat position per class: `[total, num_classes]` logits.
    pub fn score_positions(&self, features: &FlattenedFeatures) -> Result<Tensor> {
        let seq_t = features.seq.transpose2()?; // [total, d]
        seq_t
            .linear(&self.score_fc1.0, Some(&self.score_fc1.1))?
            .relu()?
            .linear(&self.score_fc2.0, Some(&self.score_fc2.1))
    }

    /// Builds the query set for the `k` best-scored positions.
    pub fn select(
        &self,
        features: &FlattenedFeatures,
        k: usize,
        base_scale: f64,
    ) -> Result<QuerySet> {
        let total = features.total();
        if k == 0 || k > total {
            return Err(Error::Config(format!(
                "cannot select {k} of {total} positions"
            )));
        }
        validate_base_scale(base_scale, features.num_levels())?;
        let scores = self.score_positions(features)?;
        let mut selected = top_k_positions(&scores, k)?;
        // Scores decide membership only; store the set in position order
        // (see the `selected` field docs).
        selected.sort_unstable();

        let seq_t = features.seq.transpose2()?;
        let picked = seq_t.gather_rows(&selected)?; // [k, d]
        let content = picked.linear(&self.content.0, Some(&self.content.1))?;
        let delta = picked
            .linear(&self.refine_fc1.0, Some(&self.refine_fc1.1))?
            .relu()?
            .linear(&self.refine_fc2.0, Some(&self.refine_fc2.1))?; // [k, 4]

        let mut provenance = Vec::with_capacity(k);
        let mut prior_logits = Vec::with_capacity(k * 4);
        for &flat in &selected {
            let (level, y, x) = features.position_of(flat)?;
            provenance.push((level, y, x));
            let prior = anchor_prior(features, flat, base_scale)?;
            prior_logits.extend_from_slice(&[
                inverse_sigmoid(prior.cx),
                inverse_sigmoid(prior.cy),
                inverse_sigmoid(prior.w),
                inverse_sigmoid(prior.h),
            ]);
        }
        let priors = Tensor::from_vec(&[k, 4], prior_logits)?;
        let anchor_logits = priors.add(&delta)?;
        let anchors = anchor_logits.sigmoid()?;
        let boxes = anchors
            .data()
            .chunks_exact(4)
            .map(|b| AnchorBox { cx: b[0], cy: b[1], w: b[2], h: b[3] })
            .collect();
        Ok(QuerySet {
            content,
            anchors,
            anchor_logits,
            boxes,
            provenance,
            selected,
            scores,
        })
    }
}

impl ParamVisitor for SelectionHead {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.score.fc1.weight"), &mut self.score_fc1.0);
        f(format!("{prefix}.score.fc1.bias"), &mut self.score_fc1.1);
        f(format!("{prefix}.score.fc2.weight"), &mut self.score_fc2.0);
        f(format!("{prefix}.score.fc2.bias"), &mut self.score_fc2.1);
        f(format!("{prefix}.content.weight"), &mut self.content.0);
        f(format!("{prefix}.content.bias"), &mut self.content.1);
        f(format!("{prefix}.refine.fc1.weight"), &mut self.refine_fc1.0);
        f(format!("{prefix}.refine.fc1.bias"), &mut self.refine_fc1.1);
        f(format!("{prefix}.refine.fc2.weight"), &mut self.refine_fc2.0);
        f(format!("{prefix}.refine.fc2.bias"), &mut self.refine_fc2.1);
    }
}

/// Ranks flat positions by their best class logit, descending; ties break
/// toward the lower position index. Returns the first `k`.
///
/// k′ ⊆ k prefix consistency holds by construction: the ranking is a fixed
/// total order and `k` only truncates it.
pub fn top_k_positions(scores: &Tensor, k: usize) -> Result<Vec<usize>> {
    let (total, classes) = match *scores.shape() {
        [t, c] => (t, c),
        ref other => {
            return Err(Error::shape(
                "top_k_positions",
                format!("expected [total, classes] scores, got {:?}", other),
            ))
        }
    };
    if classes == 0 {
        return Err(Error::shape("top_k_positions", "no classes".to_string()));
    }
    if k == 0 || k > total {
        return Err(Error::Config(format!("cannot rank {k} of {total} positions")));
    }
    let data = scores.data();
    let mut order: Vec<(f64, usize)> = (0..total)
        .map(|p| {
            let best = data[p * classes..(p + 1) * classes]
                .iter()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max);
            (best, p)
        })
        .collect();
    order.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal).then(a.1.cmp(&b.1)));
    Ok(order.into_iter().take(k).map(|(_, p)| p).collect())
}

/// Prior anchor for a flat position: centered on its cell, with extent
/// `base_scale · 2^level` (coarser levels propose larger boxes).
pub fn anchor_prior(
    features: &FlattenedFeatures,
    flat: usize,
    base_scale: f64,
) -> Result<AnchorBox> {
    validate_base_scale(base_scale, features.num_levels())?;
    let (level, y, x) = features.position_of(flat)?;
    let (h, w) = features.level_dims[level];
    let size = base_scale * (1 << level) as f64;
    let anchor = AnchorBox {
        cx: (x as f64 + 0.5) / w as f64,
        cy: (y as f64 + 0.5) / h as f64,
        w: size,
        h: size,
    };
    debug_assert!(anchor.is_valid());
    Ok(anchor)
}

fn validate_base_scale(base_scale: f64, levels: usize) -> Result<()> {
    let coarsest = base_scale * (1u64 << (levels - 1)) as f64;
    if !(base_scale > 0.0 && coarsest < 1.0) {
        return Err(Error::Config(format!(
            "base anchor scale {base_scale} invalid: coarsest level would propose extent {coarsest}"
        )));
    }
    Ok(())
}

/// Selects the query set for an image given its predicted count level: the
/// budget table sets `k`, clamped to the number of available positions.
pub fn dynamic_pipeline(
    head: &SelectionHead,
    features: &FlattenedFeatures,
    level: CountLevel,
    budgets: &QueryBudget,
    base_scale: f64,
) -> Result<QuerySet> {
    let budget = budgets.level_to_budget(level)?;
    let total = features.total();
    let k = budget.min(total);
    if k < budget {
        log::debug!("query budget {budget} clamped to {total} available positions");
    }
    head.select(features, k, base_scale)
}
