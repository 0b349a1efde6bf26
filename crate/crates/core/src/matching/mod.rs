//! Set-based detection loss: optimal bipartite matching between predicted
//! queries and ground-truth objects, then weighted L1 + generalized-IoU
//! box terms and a sigmoid focal classification term over the matched
//! assignment. Earlier decoder layers contribute the same loss on their
//! own (independently re-matched) predictions, and the count classifier
//! adds a cross-entropy term; the reported breakdown satisfies
//! `total = hungarian + aux + counting` exactly as f64 arithmetic.

mod hungarian;

pub use hungarian::min_cost_assignment;

use crate::error::{Error, Result};
use crate::tensor::{no_grad, Tensor};
use crate::transformer::{DecoderOutput, LayerPrediction};

/// Annotated objects for one image: center-form boxes in image fractions
/// and a class index per box.
#[derive(Debug, Clone, Default)]
pub struct GroundTruth {
    boxes: Vec<[f64; 4]>,
    classes: Vec<usize>,
}

impl GroundTruth {
    /// Validates that boxes and classes line up and every box is finite
    /// with positive extent.
    pub fn new(boxes: Vec<[f64; 4]>, classes: Vec<usize>) -> Result<GroundTruth> {
        if boxes.len() != classes.len() {
            return Err(Error::Config(format!(
                "{} boxes but {} class labels",
                boxes.len(),
                classes.len()
            )));
        }
        for (i, b) in boxes.iter().enumerate() {
            if !b.iter().all(|v| v.is_finite()) || b[2] <= 0.0 || b[3] <= 0.0 {
                return Err(Error::Config(format!("box {i} is degenerate: {b:?}")));
            }
        }
        Ok(GroundTruth { boxes, classes })
    }

    /// Number of annotated objects.
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    /// True when the image has no objects.
    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// Center-form boxes.
    pub fn boxes(&self) -> &[[f64; 4]] {
        &self.boxes
    }

    /// Class index per box.
    pub fn classes(&self) -> &[usize] {
        &self.classes
    }
}

/// Loss weights and focal-loss shape parameters.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchWeights {
    /// Weight on the L1 box term.
    pub l1: f64,
    /// Weight on the (1 − GIoU) box term.
    pub giou: f64,
    /// Weight on the focal classification term.
    pub focal: f64,
    /// Focal positive/negative balance; `None` weights both sides at 1.
    pub alpha: Option<f64>,
    /// Focal down-weighting exponent for easy examples.
    pub gamma: f64,
}

impl Default for MatchWeights {
    fn default() -> MatchWeights {
        MatchWeights { l1: 5.0, giou: 2.0, focal: 1.0, alpha: Some(0.25), gamma: 2.0 }
    }
}

/// Per-term loss values (plain numbers, for logging and tests). The
/// identities `hungarian = l1·w_l1 + giou·w_giou + focal·w_focal` and
/// `total = hungarian + aux + counting` hold exactly.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossBreakdown {
    /// Final layer's normalized L1 box distance (unweighted).
    pub l1: f64,
    /// Final layer's normalized (1 − GIoU) (unweighted).
    pub giou: f64,
    /// Final layer's normalized focal classification loss (unweighted).
    pub focal: f64,
    /// Weighted sum of the three final-layer terms.
    pub hungarian: f64,
    /// Same weighted loss summed over earlier decoder layers.
    pub aux: f64,
    /// Count-level cross entropy.
    pub counting: f64,
    /// `hungarian + aux + counting`.
    pub total: f64,
}

/// A differentiable scalar loss plus its breakdown.
#[derive(Debug, Clone)]
pub struct LossBundle {
    /// Scalar tensor to call `backward()` on.
    pub loss: Tensor,
    pub breakdown: LossBreakdown,
}

/// Intersection over union of two center-form boxes; 0 when disjoint.
pub fn iou_pair(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let (ax1, ay1, ax2, ay2) = corners(a);
    let (bx1, by1, bx2, by2) = corners(b);
    let inter_w = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let inter_h = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = inter_w * inter_h;
    let union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter;
    inter / union
}

/// Generalized IoU between two center-form boxes: IoU minus the fraction
/// of the enclosing hull not covered by the union. Range [−1, 1]; 1 only
/// for identical boxes, negative when boxes are far apart.
pub fn giou_pair(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let (ax1, ay1, ax2, ay2) = corners(a);
    let (bx1, by1, bx2, by2) = corners(b);
    let inter_w = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let inter_h = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = inter_w * inter_h;
    let union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter;
    let hull = (ax2.max(bx2) - ax1.min(bx1)) * (ay2.max(by2) - ay1.min(by1));
    inter / union - (hull - union) / hull
}

fn corners(b: &[f64; 4]) -> (f64, f64, f64, f64) {
    (b[0] - b[2] / 2.0, b[1] - b[3] / 2.0, b[0] + b[2] / 2.0, b[1] + b[3] / 2.0)
}

/// Differentiable GIoU for row-aligned box pairs: `pred` and `target` are
/// `[m, 4]` center-form; returns `[m, 1]`.
fn giou_rows(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    let half = |t: &Tensor, c: usize| -> Result<Tensor> { t.slice_cols(c, c + 1)?.mul_scalar(0.5) };
    let col = |t: &Tensor, c: usize| -> Result<Tensor> { t.slice_cols(c, c + 1) };

    let (px1, px2) = {
        let (cx, hw) = (col(pred, 0)?, half(pred, 2)?);
        (cx.sub(&hw)?, cx.add(&hw)?)
    };
    let (py1, py2) = {
        let (cy, hh) = (col(pred, 1)?, half(pred, 3)?);
        (cy.sub(&hh)?, cy.add(&hh)?)
    };
    let (tx1, tx2) = {
        let (cx, hw) = (col(target, 0)?, half(target, 2)?);
        (cx.sub(&hw)?, cx.add(&hw)?)
    };
    let (ty1, ty2) = {
        let (cy, hh) = (col(target, 1)?, half(target, 3)?);
        (cy.sub(&hh)?, cy.add(&hh)?)
    };

    let inter_w = px2.minimum(&tx2)?.sub(&px1.maximum(&tx1)?)?.relu()?;
    let inter_h = py2.minimum(&ty2)?.sub(&py1.maximum(&ty1)?)?.relu()?;
    let inter = inter_w.mul(&inter_h)?;
    let area_p = px2.sub(&px1)?.mul(&py2.sub(&py1)?)?;
    let area_t = tx2.sub(&tx1)?.mul(&ty2.sub(&ty1)?)?;
    let union = area_p.add(&area_t)?.sub(&inter)?;
    let hull_w = px2.maximum(&tx2)?.sub(&px1.minimum(&tx1)?)?;
    let hull_h = py2.maximum(&ty2)?.sub(&py1.minimum(&ty1)?)?;
    let hull = hull_w.mul(&hull_h)?;
    inter.div(&union)?.sub(&hull.sub(&union)?.div(&hull)?)
}

fn softplus_scalar(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Sigmoid focal loss summed over every (query, class) cell of `logits`
/// (`[k, m]`). `positives` lists the cells labeled 1; everything else is
/// background. With `gamma = 0` and `alpha = None` this is exactly the
/// summed binary cross entropy.
pub fn focal_loss(
    logits: &Tensor,
    positives: &[(usize, usize)],
    alpha: Option<f64>,
    gamma: f64,
) -> Result<Tensor> {
    let (k, m) = match *logits.shape() {
        [k, m] => (k, m),
        ref other => {
            return Err(Error::shape(
                "focal_loss",
                format!("expected [queries, classes] logits, got {:?}", other),
            ))
        }
    };
    if gamma < 0.0 {
        return Err(Error::Config(format!("focal gamma {gamma} must be nonnegative")));
    }
    if let Some(a) = alpha {
        if !(0.0..=1.0).contains(&a) {
            return Err(Error::Config(format!("focal alpha {a} outside [0, 1]")));
        }
    }
    let mut t = vec![0.0; k * m];
    for &(q, c) in positives {
        if q >= k || c >= m {
            return Err(Error::Config(format!(
                "positive cell ({q}, {c}) outside {k}×{m} logits"
            )));
        }
        t[q * m + c] = 1.0;
    }
    let target = Tensor::from_vec(&[k, m], t)?;
    let (a_pos, a_neg) = match alpha {
        Some(a) => (a, 1.0 - a),
        None => (1.0, 1.0),
    };
    let p = logits.sigmoid()?;
    // −ln σ(x) = softplus(−x); −ln(1 − σ(x)) = softplus(x).
    let pos_nll = logits.neg()?.softplus()?;
    let neg_nll = logits.softplus()?;
    let pos_term = p.neg()?.add_scalar(1.0)?.powf(gamma)?.mul(&pos_nll)?.mul_scalar(a_pos)?;
    let neg_term = p.powf(gamma)?.mul(&neg_nll)?.mul_scalar(a_neg)?;
    let background = target.neg()?.add_scalar(1.0)?;
    target
        .mul(&pos_term)?
        .add(&background.mul(&neg_term)?)?
        .sum_all()
}

/// Builds the `queries × objects` matching cost matrix (plain numbers, no
/// gradient): weighted L1 + (1 − GIoU) box distance plus a focal-shaped
/// classification cost (positive-case minus negative-case loss, so
/// confidently-right predictions are cheap and confidently-wrong ones
/// expensive).
pub fn match_costs(
    class_logits: &Tensor,
    boxes: &Tensor,
    gt: &GroundTruth,
    weights: &MatchWeights,
) -> Result<Vec<f64>> {
    let (k, m) = match *class_logits.shape() {
        [k, m] => (k, m),
        ref other => {
            return Err(Error::shape(
                "match_costs",
                format!("expected [queries, classes] logits, got {:?}", other),
            ))
        }
    };
    if boxes.shape() != [k, 4] {
        return Err(Error::shape(
            "match_costs",
            format!("expected [{k}, 4] boxes, got {:?}", boxes.shape()),
        ));
    }
    if let Some(&c) = gt.classes.iter().find(|&&c| c >= m) {
        return Err(Error::Config(format!("ground-truth class {c} outside {m} classes")));
    }
    let (a_pos, a_neg) = match weights.alpha {
        Some(a) => (a, 1.0 - a),
        None => (1.0, 1.0),
    };
    let logit_data = class_logits.data();
    let box_data = boxes.data();
    let mut cost = Vec::with_capacity(k * gt.len());
    for q in 0..k {
        let qb: &[f64] = &box_data[q * 4..q * 4 + 4];
        let qb4 = [qb[0], qb[1], qb[2], qb[3]];
        for (g, gb) in gt.boxes.iter().enumerate() {
            let x = logit_data[q * m + gt.classes[g]];
            let p = crate::tensor::sigmoid_scalar(x);
            let pos = a_pos * (1.0 - p).powf(weights.gamma) * softplus_scalar(-x);
            let neg = a_neg * p.powf(weights.gamma) * softplus_scalar(x);
            let class_cost = pos - neg;
            let l1: f64 = qb.iter().zip(gb.iter()).map(|(a, b)| (a - b).abs()).sum();
            let giou_cost = 1.0 - giou_pair(&qb4, gb);
            cost.push(weights.focal * class_cost + weights.l1 * l1 + weights.giou * giou_cost);
        }
    }
    Ok(cost)
}

/// Optimal query↔object assignment under [`match_costs`]; returns
/// `min(queries, objects)` pairs `(query, object)` sorted by query index.
pub fn hungarian_match(
    class_logits: &Tensor,
    boxes: &Tensor,
    gt: &GroundTruth,
    weights: &MatchWeights,
) -> Result<Vec<(usize, usize)>> {
    let cost = no_grad(|| match_costs(class_logits, boxes, gt, weights))?;
    min_cost_assignment(&cost, class_logits.shape()[0], gt.len())
}

/// One query↔object assignment per decoder layer (finest-to-last order of
/// [`DecoderOutput::layers`]), each independently optimal under
/// [`match_costs`].
pub fn layer_assignments(
    output: &DecoderOutput,
    gt: &GroundTruth,
    weights: &MatchWeights,
) -> Result<Vec<Vec<(usize, usize)>>> {
    output
        .layers
        .iter()
        .map(|layer| hungarian_match(&layer.class_logits, &layer.boxes, gt, weights))
        .collect()
}

/// The three unweighted loss terms for one decoder layer under a given
/// assignment, each normalized by `max(objects, 1)`.
fn layer_terms_with(
    layer: &LayerPrediction,
    gt: &GroundTruth,
    pairs: &[(usize, usize)],
    weights: &MatchWeights,
) -> Result<(Tensor, Tensor, Tensor)> {
    let norm = 1.0 / gt.len().max(1) as f64;
    if gt.is_empty() {
        let focal = focal_loss(&layer.class_logits, &[], weights.alpha, weights.gamma)?;
        return Ok((Tensor::scalar(0.0), Tensor::scalar(0.0), focal));
    }
    let k = layer.boxes.shape()[0];
    if let Some(&(q, g)) = pairs.iter().find(|&&(q, g)| q >= k || g >= gt.len()) {
        return Err(Error::shape(
            "matched_loss",
            format!(
                "assignment ({q}, {g}) outside {k} queries x {} objects",
                gt.len()
            ),
        ));
    }
    let query_idx: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let matched = layer.boxes.gather_rows(&query_idx)?;
    let target_rows: Vec<f64> =
        pairs.iter().flat_map(|&(_, g)| gt.boxes[g].iter().copied()).collect();
    let target = Tensor::from_vec(&[pairs.len(), 4], target_rows)?;

    let l1 = matched.sub(&target)?.abs()?.sum_all()?.mul_scalar(norm)?;
    let giou = giou_rows(&matched, &target)?
        .neg()?
        .add_scalar(1.0)?
        .sum_all()?
        .mul_scalar(norm)?;
    let positives: Vec<(usize, usize)> =
        pairs.iter().map(|&(q, g)| (q, gt.classes[g])).collect();
    let focal = focal_loss(&layer.class_logits, &positives, weights.alpha, weights.gamma)?
        .mul_scalar(norm)?;
    Ok((l1, giou, focal))
}


fn combine(l1: &Tensor, giou: &Tensor, focal: &Tensor, w: &MatchWeights) -> Result<Tensor> {
    l1.mul_scalar(w.l1)?
        .add(&giou.mul_scalar(w.giou)?)?
        .add(&focal.mul_scalar(w.focal)?)
}

/// Full training loss for one image: matched detection loss on the final
/// decoder layer, the same (independently re-matched) loss on each earlier
/// layer, plus a precomputed scalar counting term (cross entropy or a
/// regression penalty; `None` contributes zero for models without a
/// counting head).
pub fn total_loss(
    output: &DecoderOutput,
    gt: &GroundTruth,
    counting_term: Option<&Tensor>,
    weights: &MatchWeights,
) -> Result<LossBundle> {
    if output.layers.is_empty() {
        return Err(Error::Config("decoder produced no layers".to_string()));
    }
    let assignments = layer_assignments(output, gt, weights)?;
    matched_loss(output, gt, &assignments, counting_term, weights)
}

/// [`total_loss`] under caller-supplied per-layer assignments instead of
/// freshly optimal ones. Because re-matching makes the training objective
/// only piecewise-smooth, freezing the assignment is what makes the loss
/// differentiable everywhere — useful for finite-difference gradient
/// validation or any analysis that must hold the matching fixed.
pub fn matched_loss(
    output: &DecoderOutput,
    gt: &GroundTruth,
    assignments: &[Vec<(usize, usize)>],
    counting_term: Option<&Tensor>,
    weights: &MatchWeights,
) -> Result<LossBundle> {
    if output.layers.is_empty() {
        return Err(Error::Config("decoder produced no layers".to_string()));
    }
    if assignments.len() != output.layers.len() {
        return Err(Error::shape(
            "matched_loss",
            format!(
                "{} assignments for {} decoder layers",
                assignments.len(),
                output.layers.len()
            ),
        ));
    }
    if let Some(t) = counting_term {
        if t.numel() != 1 {
            return Err(Error::shape(
                "matched_loss",
                format!("counting term must be scalar, got {:?}", t.shape()),
            ));
        }
    }
    let last = output.layers.len() - 1;
    let (l1, giou, focal) =
        layer_terms_with(output.final_layer(), gt, &assignments[last], weights)?;
    let hungarian = combine(&l1, &giou, &focal, weights)?;

    let mut aux = Tensor::scalar(0.0);
    for (layer, pairs) in output.layers[..last].iter().zip(assignments) {
        let (al1, agiou, afocal) = layer_terms_with(layer, gt, pairs, weights)?;
        aux = aux.add(&combine(&al1, &agiou, &afocal, weights)?)?;
    }

    let counting = match counting_term {
        Some(t) => t.reshape(&[1])?,
        None => Tensor::scalar(0.0),
    };
    let total = hungarian.add(&aux)?.add(&counting)?;
    let breakdown = LossBreakdown {
        l1: l1.item()?,
        giou: giou.item()?,
        focal: focal.item()?,
        hungarian: hungarian.item()?,
        aux: aux.item()?,
        counting: counting.item()?,
        total: total.item()?,
    };
    if !breakdown.total.is_finite() {
        return Err(Error::NonFinite { context: format!("loss breakdown {breakdown:?}") });
    }
    Ok(LossBundle { loss: total, breakdown })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::counting::{counting_loss, CountLevel};
    use crate::tensor::grad_check;
    use proptest::prelude::*;

    fn layer(logits: Tensor, boxes: Tensor) -> LayerPrediction {
        LayerPrediction { class_logits: logits, boxes }
    }

    #[test]
    fn ground_truth_validates_inputs() {
        assert!(GroundTruth::new(vec![[0.5, 0.5, 0.1, 0.1]], vec![0]).is_ok());
        assert!(GroundTruth::new(vec![[0.5, 0.5, 0.1, 0.1]], vec![0, 1]).is_err());
        assert!(GroundTruth::new(vec![[0.5, 0.5, 0.0, 0.1]], vec![0]).is_err());
        assert!(GroundTruth::new(vec![[f64::NAN, 0.5, 0.1, 0.1]], vec![0]).is_err());
    }

    #[test]
    fn giou_of_identical_boxes_is_one() {
        let b = [0.4, 0.6, 0.2, 0.3];
        assert!((giou_pair(&b, &b) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn giou_of_separated_unit_squares_is_minus_seven_ninths() {
        // Corner boxes (0,0)-(1,1) and (2,2)-(3,3): no overlap, union 2,
        // enclosing hull 9 ⇒ GIoU = 0 − 7/9.
        let a = [0.5, 0.5, 1.0, 1.0];
        let b = [2.5, 2.5, 1.0, 1.0];
        assert!((giou_pair(&a, &b) - (-7.0 / 9.0)).abs() < 1e-12);
        assert!((giou_pair(&b, &a) - (-7.0 / 9.0)).abs() < 1e-12);
    }

    #[test]
    fn giou_of_nested_boxes_is_the_area_ratio() {
        // Inner box entirely inside outer: IoU = 1/4, hull = union ⇒ GIoU = 1/4.
        let outer = [0.5, 0.5, 0.4, 0.4];
        let inner = [0.5, 0.5, 0.2, 0.2];
        assert!((giou_pair(&outer, &inner) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn giou_rows_matches_scalar_oracle() {
        let preds = [[0.3, 0.4, 0.2, 0.1], [0.7, 0.7, 0.3, 0.3], [0.2, 0.8, 0.05, 0.4]];
        let gts = [[0.35, 0.38, 0.25, 0.12], [0.1, 0.1, 0.08, 0.08], [0.2, 0.8, 0.05, 0.4]];
        let p = Tensor::from_vec(&[3, 4], preds.concat()).unwrap();
        let t = Tensor::from_vec(&[3, 4], gts.concat()).unwrap();
        let got = giou_rows(&p, &t).unwrap();
        for i in 0..3 {
            let expect = giou_pair(&preds[i], &gts[i]);
            assert!((got.data()[i] - expect).abs() < 1e-12, "row {i}");
        }
    }

    #[test]
    fn focal_hand_value_single_positive_at_even_odds() {
        // σ(0) = 0.5: loss = α (1−p)^γ (−ln p) = 0.25 · 0.25 · ln 2.
        let logits = Tensor::from_vec(&[1, 1], vec![0.0]).unwrap();
        let loss = focal_loss(&logits, &[(0, 0)], Some(0.25), 2.0).unwrap();
        let expect = 0.25 * 0.25 * std::f64::consts::LN_2;
        assert!((loss.item().unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn focal_hand_value_single_negative_at_even_odds() {
        let logits = Tensor::from_vec(&[1, 1], vec![0.0]).unwrap();
        let loss = focal_loss(&logits, &[], Some(0.25), 2.0).unwrap();
        let expect = 0.75 * 0.25 * std::f64::consts::LN_2;
        assert!((loss.item().unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn focal_with_gamma_zero_and_no_alpha_is_binary_cross_entropy() {
        let vals = vec![1.3, -0.7, 0.2, 2.5, -3.1, 0.0];
        let logits = Tensor::from_vec(&[2, 3], vals.clone()).unwrap();
        let positives = [(0, 1), (1, 2)];
        let loss = focal_loss(&logits, &positives, None, 0.0).unwrap().item().unwrap();
        let mut expect = 0.0;
        for q in 0..2 {
            for c in 0..3 {
                let x = vals[q * 3 + c];
                let p = 1.0 / (1.0 + (-x).exp());
                let t = if positives.contains(&(q, c)) { 1.0 } else { 0.0 };
                expect += -(t * p.ln() + (1.0 - t) * (1.0 - p).ln());
            }
        }
        assert!((loss - expect).abs() < 1e-12, "{loss} vs {expect}");
    }

    #[test]
    fn focal_rejects_bad_parameters_and_cells() {
        let logits = Tensor::from_vec(&[1, 2], vec![0.0, 0.0]).unwrap();
        assert!(focal_loss(&logits, &[], Some(1.5), 2.0).is_err());
        assert!(focal_loss(&logits, &[], Some(0.25), -1.0).is_err());
        assert!(focal_loss(&logits, &[(0, 2)], Some(0.25), 2.0).is_err());
        assert!(focal_loss(&logits, &[(1, 0)], Some(0.25), 2.0).is_err());
    }

    #[test]
    fn matching_prefers_the_obviously_right_query() {
        // Query 0 overlaps the object and is confident in its class;
        // query 1 is far away and favors the wrong class.
        let logits = Tensor::from_vec(&[2, 2], vec![3.0, -3.0, -3.0, 3.0]).unwrap();
        let boxes = Tensor::from_vec(
            &[2, 4],
            vec![0.32, 0.29, 0.21, 0.19, 0.8, 0.8, 0.1, 0.1],
        )
        .unwrap();
        let gt = GroundTruth::new(vec![[0.3, 0.3, 0.2, 0.2]], vec![0]).unwrap();
        let pairs = hungarian_match(&logits, &boxes, &gt, &MatchWeights::default()).unwrap();
        assert_eq!(pairs, vec![(0, 0)]);
    }

    #[test]
    fn matching_assigns_every_object_exactly_once() {
        let logits = Tensor::from_vec(&[4, 3], vec![0.1; 12]).unwrap();
        let boxes = Tensor::from_vec(
            &[4, 4],
            vec![
                0.2, 0.2, 0.1, 0.1, //
                0.8, 0.8, 0.1, 0.1, //
                0.5, 0.5, 0.1, 0.1, //
                0.2, 0.8, 0.1, 0.1,
            ],
        )
        .unwrap();
        let gt = GroundTruth::new(
            vec![[0.8, 0.8, 0.12, 0.12], [0.2, 0.2, 0.12, 0.12]],
            vec![1, 2],
        )
        .unwrap();
        let pairs = hungarian_match(&logits, &boxes, &gt, &MatchWeights::default()).unwrap();
        assert_eq!(pairs, vec![(0, 1), (1, 0)]);
    }

    #[test]
    fn breakdown_identities_are_exact() {
        let w = MatchWeights::default();
        let logits1 = Tensor::from_vec(&[3, 2], vec![1.0, -0.5, 0.3, 0.8, -1.2, 0.4]).unwrap();
        let boxes1 = Tensor::from_vec(
            &[3, 4],
            vec![0.3, 0.3, 0.2, 0.2, 0.6, 0.6, 0.15, 0.2, 0.5, 0.2, 0.1, 0.1],
        )
        .unwrap();
        let logits2 = Tensor::from_vec(&[3, 2], vec![0.2, 0.1, -0.4, 1.1, 0.7, -0.3]).unwrap();
        let boxes2 = Tensor::from_vec(
            &[3, 4],
            vec![0.32, 0.28, 0.18, 0.22, 0.58, 0.62, 0.17, 0.18, 0.45, 0.25, 0.12, 0.09],
        )
        .unwrap();
        let output = DecoderOutput { layers: vec![layer(logits1, boxes1), layer(logits2, boxes2)] };
        let gt = GroundTruth::new(
            vec![[0.31, 0.3, 0.19, 0.21], [0.59, 0.61, 0.16, 0.19]],
            vec![0, 1],
        )
        .unwrap();
        let count_logits = Tensor::from_vec(&[4], vec![0.3, 1.2, -0.5, 0.1]).unwrap();
        let counting = counting_loss(&count_logits, CountLevel(1)).unwrap();
        let bundle = total_loss(&output, &gt, Some(&counting), &w).unwrap();
        let b = bundle.breakdown;
        assert_eq!(b.hungarian, w.l1 * b.l1 + w.giou * b.giou + w.focal * b.focal);
        assert_eq!(b.total, b.hungarian + b.aux + b.counting);
        assert_eq!(b.total, bundle.loss.item().unwrap());
        assert!(b.aux > 0.0, "earlier layer must contribute");
        assert!(b.counting > 0.0);
    }

    #[test]
    fn matched_loss_under_optimal_assignments_equals_total_loss() {
        let w = MatchWeights::default();
        let logits1 = Tensor::from_vec(&[3, 2], vec![1.0, -0.5, 0.3, 0.8, -1.2, 0.4]).unwrap();
        let boxes1 = Tensor::from_vec(
            &[3, 4],
            vec![0.3, 0.3, 0.2, 0.2, 0.6, 0.6, 0.15, 0.2, 0.5, 0.2, 0.1, 0.1],
        )
        .unwrap();
        let logits2 = Tensor::from_vec(&[3, 2], vec![0.2, 0.1, -0.4, 1.1, 0.7, -0.3]).unwrap();
        let boxes2 = Tensor::from_vec(
            &[3, 4],
            vec![0.32, 0.28, 0.18, 0.22, 0.58, 0.62, 0.17, 0.18, 0.45, 0.25, 0.12, 0.09],
        )
        .unwrap();
        let output = DecoderOutput { layers: vec![layer(logits1, boxes1), layer(logits2, boxes2)] };
        let gt = GroundTruth::new(
            vec![[0.31, 0.3, 0.19, 0.21], [0.59, 0.61, 0.16, 0.19]],
            vec![0, 1],
        )
        .unwrap();
        let count_logits = Tensor::from_vec(&[4], vec![0.3, 1.2, -0.5, 0.1]).unwrap();
        let counting = counting_loss(&count_logits, CountLevel(1)).unwrap();

        let total = total_loss(&output, &gt, Some(&counting), &w).unwrap();
        let assignments = layer_assignments(&output, &gt, &w).unwrap();
        assert_eq!(assignments.len(), 2);
        let frozen = matched_loss(&output, &gt, &assignments, Some(&counting), &w).unwrap();
        assert_eq!(frozen.breakdown.total.to_bits(), total.breakdown.total.to_bits());
        assert_eq!(frozen.breakdown.aux.to_bits(), total.breakdown.aux.to_bits());
        assert_eq!(frozen.breakdown.l1.to_bits(), total.breakdown.l1.to_bits());
    }

    #[test]
    fn matched_loss_rejects_malformed_assignments() {
        let w = MatchWeights::default();
        let logits = Tensor::from_vec(&[2, 2], vec![0.5, -0.5, 0.2, 0.1]).unwrap();
        let boxes =
            Tensor::from_vec(&[2, 4], vec![0.3, 0.3, 0.1, 0.1, 0.7, 0.7, 0.1, 0.1]).unwrap();
        let output = DecoderOutput { layers: vec![layer(logits, boxes)] };
        let gt = GroundTruth::new(vec![[0.3, 0.3, 0.1, 0.1]], vec![0]).unwrap();

        // One assignment per layer, or nothing.
        assert!(matches!(
            matched_loss(&output, &gt, &[], None, &w),
            Err(Error::Shape { .. })
        ));
        // Query index outside the prediction set.
        assert!(matches!(
            matched_loss(&output, &gt, &[vec![(5, 0)]], None, &w),
            Err(Error::Shape { .. })
        ));
        // Object index outside the ground truth.
        assert!(matches!(
            matched_loss(&output, &gt, &[vec![(0, 3)]], None, &w),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn empty_ground_truth_leaves_only_background_and_counting_terms() {
        let w = MatchWeights::default();
        let logits = Tensor::from_vec(&[2, 2], vec![0.5, -0.5, 0.2, 0.1]).unwrap();
        let boxes = Tensor::from_vec(&[2, 4], vec![0.3; 8]).unwrap();
        let output = DecoderOutput { layers: vec![layer(logits, boxes)] };
        let gt = GroundTruth::default();
        let count_logits = Tensor::from_vec(&[4], vec![2.0, 0.0, 0.0, 0.0]).unwrap();
        let counting = counting_loss(&count_logits, CountLevel(0)).unwrap();
        let bundle = total_loss(&output, &gt, Some(&counting), &w).unwrap();
        let b = bundle.breakdown;
        assert_eq!(b.l1, 0.0);
        assert_eq!(b.giou, 0.0);
        assert!(b.focal > 0.0, "background focal loss still applies");
        assert_eq!(b.aux, 0.0);
        assert_eq!(b.total, b.hungarian + b.aux + b.counting);
    }

    #[test]
    fn single_layer_output_has_zero_aux() {
        let w = MatchWeights::default();
        let logits = Tensor::from_vec(&[2, 2], vec![0.5, -0.5, 0.2, 0.1]).unwrap();
        let boxes =
            Tensor::from_vec(&[2, 4], vec![0.3, 0.3, 0.1, 0.1, 0.7, 0.7, 0.1, 0.1]).unwrap();
        let output = DecoderOutput { layers: vec![layer(logits, boxes)] };
        let gt = GroundTruth::new(vec![[0.3, 0.3, 0.1, 0.1]], vec![0]).unwrap();
        let bundle = total_loss(&output, &gt, None, &w).unwrap();
        assert_eq!(bundle.breakdown.aux, 0.0);
        assert_eq!(bundle.breakdown.counting, 0.0, "no counting head, no counting term");
    }

    #[test]
    fn perfect_prediction_drives_box_terms_to_zero() {
        let w = MatchWeights::default();
        let gt_box = [0.4, 0.4, 0.2, 0.2];
        let logits = Tensor::from_vec(&[1, 2], vec![8.0, -8.0]).unwrap();
        let boxes = Tensor::from_vec(&[1, 4], gt_box.to_vec()).unwrap();
        let output = DecoderOutput { layers: vec![layer(logits, boxes)] };
        let gt = GroundTruth::new(vec![gt_box], vec![0]).unwrap();
        let count_logits = Tensor::from_vec(&[4], vec![9.0, 0.0, 0.0, 0.0]).unwrap();
        let counting = counting_loss(&count_logits, CountLevel(0)).unwrap();
        let bundle = total_loss(&output, &gt, Some(&counting), &w).unwrap();
        assert!(bundle.breakdown.l1.abs() < 1e-12);
        assert!(bundle.breakdown.giou.abs() < 1e-12);
        assert!(bundle.breakdown.focal < 1e-3);
        assert!(bundle.breakdown.counting < 1e-3);
    }

    #[test]
    fn gradients_flow_through_the_matched_loss() {
        // Costs are well separated, so the optimal assignment is constant
        // under the ±1e-5 probes and the loss is differentiable there.
        let w = MatchWeights::default();
        let gt = GroundTruth::new(vec![[0.3, 0.3, 0.2, 0.2]], vec![0]).unwrap();
        let logits0 = Tensor::param(&[2, 2], vec![1.1, -0.9, -0.8, 0.7]).unwrap();
        let boxes0 =
            Tensor::param(&[2, 4], vec![0.33, 0.27, 0.22, 0.18, 0.81, 0.79, 0.11, 0.12]).unwrap();
        let logits1 = Tensor::param(&[2, 2], vec![0.9, -1.1, -0.6, 0.5]).unwrap();
        let boxes1 =
            Tensor::param(&[2, 4], vec![0.35, 0.26, 0.19, 0.23, 0.78, 0.83, 0.13, 0.1]).unwrap();
        let count_logits = Tensor::param(&[4], vec![0.4, -0.2, 0.3, 0.0]).unwrap();
        let inputs = [logits0, boxes0, logits1, boxes1, count_logits];
        let report = grad_check("total_loss", &inputs, 1e-5, |t| {
            let output = DecoderOutput {
                layers: vec![
                    layer(t[0].clone(), t[1].clone()),
                    layer(t[2].clone(), t[3].clone()),
                ],
            };
            let counting = counting_loss(&t[4], CountLevel(2))?;
            Ok(total_loss(&output, &gt, Some(&counting), &w)?.loss)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "max rel {}", report.max_rel_error);
    }

    proptest! {
        #[test]
        fn giou_stays_in_range(
            acx in 0.05f64..0.95, acy in 0.05f64..0.95, aw in 0.01f64..0.5, ah in 0.01f64..0.5,
            bcx in 0.05f64..0.95, bcy in 0.05f64..0.95, bw in 0.01f64..0.5, bh in 0.01f64..0.5,
        ) {
            let g = giou_pair(&[acx, acy, aw, ah], &[bcx, bcy, bw, bh]);
            prop_assert!((-1.0..=1.0).contains(&g), "giou {g} out of range");
        }

        #[test]
        fn matching_total_cost_is_never_beaten_by_identity(
            seed in 0u64..500,
        ) {
            // Random 4-query/3-object instance: the optimal assignment must
            // not cost more than the first-three-queries-in-order one.
            let mut state = seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(1);
            let mut next = move || {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (state >> 16) as f64 / (1u64 << 48) as f64
            };
            let logits = Tensor::from_vec(&[4, 3], (0..12).map(|_| next() * 4.0 - 2.0).collect())?;
            let boxes = Tensor::from_vec(
                &[4, 4],
                (0..16).map(|_| 0.1 + next() * 0.8).collect(),
            )?;
            let gt = GroundTruth::new(
                (0..3).map(|_| [0.1 + next() * 0.8, 0.1 + next() * 0.8, 0.05 + next() * 0.3, 0.05 + next() * 0.3]).collect(),
                vec![0, 1, 2],
            ).unwrap();
            let w = MatchWeights::default();
            let cost = match_costs(&logits, &boxes, &gt, &w).unwrap();
            let pairs = hungarian_match(&logits, &boxes, &gt, &w).unwrap();
            let optimal: f64 = pairs.iter().map(|&(q, g)| cost[q * 3 + g]).sum();
            let identity: f64 = (0..3).map(|i| cost[i * 3 + i]).sum();
            prop_assert!(optimal <= identity + 1e-9);
        }
    }
}
