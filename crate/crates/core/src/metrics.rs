//! Detection-quality metrics over an evaluated corpus: average precision
//! in the COCO style (greedy per-image matching at ten IoU thresholds,
//! 101-point interpolated precision, a per-image detection cap, and
//! scale-bucketed variants) plus the optimal localization-recall-precision
//! error (LRP minimized over score thresholds).
//!
//! Boxes are center-form `(cx, cy, w, h)`; any unit works as long as
//! detections, ground truth and scale-bucket edges agree. Callers that
//! keep normalized boxes should convert to pixels first so bucket edges
//! mean what they say.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matching::iou_pair;

/// A single scored detection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    /// Center-form box `(cx, cy, w, h)`.
    pub bbox: [f64; 4],
    /// Predicted class index.
    pub class: usize,
    /// Confidence in (0, 1].
    pub score: f64,
}

/// One image's detections and ground truth, ready for scoring.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ImageEval {
    pub detections: Vec<Detection>,
    pub gt_boxes: Vec<[f64; 4]>,
    pub gt_classes: Vec<usize>,
}

/// The ten matching thresholds 0.50, 0.55, …, 0.95. Built from integer
/// ratios so the canonical values (0.60, 0.75, …) are exact.
pub fn iou_thresholds() -> [f64; 10] {
    let mut t = [0.0; 10];
    for (i, slot) in t.iter_mut().enumerate() {
        *slot = (50 + 5 * i) as f64 / 100.0;
    }
    t
}

/// Matching accepts IoU ≥ τ − ε so boxes engineered to sit exactly on a
/// threshold count as matched.
const MATCH_EPS: f64 = 1e-9;

/// Object-size partition by √area. `edges = [e0, …, en]` defines buckets
/// `[e0, e1), …, [e_{n−1}, e_n)`; sizes outside `[e0, en)` belong to no
/// bucket and are excluded from bucketed metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ScaleBuckets {
    edges: Vec<f64>,
}

impl ScaleBuckets {
    /// Validates strictly ascending, nonnegative, finite edges.
    pub fn new(edges: Vec<f64>) -> Result<ScaleBuckets> {
        if edges.len() < 2 {
            return Err(Error::Config("scale buckets need at least two edges".to_string()));
        }
        if edges.iter().any(|e| !e.is_finite() || *e < 0.0)
            || edges.windows(2).any(|p| p[0] >= p[1])
        {
            return Err(Error::Config(format!(
                "scale bucket edges must ascend strictly and be nonnegative, got {edges:?}"
            )));
        }
        Ok(ScaleBuckets { edges })
    }

    /// Reference buckets in pixels: very-tiny [2,8), tiny [8,16),
    /// small [16,32), medium [32,64).
    pub fn reference() -> ScaleBuckets {
        ScaleBuckets { edges: vec![2.0, 8.0, 16.0, 32.0, 64.0] }
    }

    /// The bucket edges.
    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    /// Number of buckets.
    pub fn len(&self) -> usize {
        self.edges.len() - 1
    }

    /// True when no buckets are defined (cannot be constructed).
    pub fn is_empty(&self) -> bool {
        false
    }

    /// Bucket index for a √area, or `None` outside every bucket (NaN is
    /// outside).
    pub fn bucket_of(&self, sqrt_area: f64) -> Option<usize> {
        if sqrt_area.is_nan() || sqrt_area < self.edges[0] || sqrt_area >= *self.edges.last().unwrap() {
            return None;
        }
        Some(self.edges.windows(2).position(|p| sqrt_area >= p[0] && sqrt_area < p[1]).unwrap())
    }

    /// Half-open √area range of one bucket.
    pub fn range(&self, bucket: usize) -> (f64, f64) {
        (self.edges[bucket], self.edges[bucket + 1])
    }

    /// Short label: the familiar names for the four reference buckets,
    /// otherwise an index-based one.
    pub fn name(&self, bucket: usize) -> String {
        if self.len() == 4 {
            ["vt", "t", "s", "m"][bucket].to_string()
        } else {
            format!("b{bucket}")
        }
    }
}

impl TryFrom<Vec<f64>> for ScaleBuckets {
    type Error = Error;
    fn try_from(edges: Vec<f64>) -> Result<Self> {
        ScaleBuckets::new(edges)
    }
}

impl From<ScaleBuckets> for Vec<f64> {
    fn from(b: ScaleBuckets) -> Vec<f64> {
        b.edges
    }
}

fn sqrt_area(b: &[f64; 4]) -> f64 {
    (b[2] * b[3]).sqrt()
}

/// One detection's fate under a fixed (class, τ, range) matching.
#[derive(Debug, Clone, Copy)]
struct DetRecord {
    score: f64,
    /// (image index, rank within image) for deterministic global ordering.
    order: (usize, usize),
    tp: bool,
    /// Ignored records count as neither true nor false positives.
    ignored: bool,
    /// IoU with the matched ground truth (0 when unmatched).
    iou: f64,
}

/// Greedy per-image matching in score order, COCO ignore semantics: a
/// detection prefers the best-IoU unmatched in-range object; failing
/// that it may match an out-of-range one (and is then ignored); unmatched
/// detections whose own size is out of range are ignored rather than
/// counted as false positives.
fn match_image_class(
    image_index: usize,
    img: &ImageEval,
    class: usize,
    tau: f64,
    range: Option<(f64, f64)>,
    max_det: usize,
) -> (Vec<DetRecord>, usize) {
    let in_range = |b: &[f64; 4]| match range {
        Some((lo, hi)) => {
            let s = sqrt_area(b);
            s >= lo && s < hi
        }
        None => true,
    };

    // Ground truth of this class, in-range objects first (stable).
    let mut gts: Vec<(usize, bool)> = Vec::new(); // (gt index, ignored)
    for (g, (&c, b)) in img.gt_classes.iter().zip(&img.gt_boxes).enumerate() {
        if c == class {
            gts.push((g, !in_range(b)));
        }
    }
    gts.sort_by_key(|&(g, ign)| (ign, g));
    let n_pos = gts.iter().filter(|&&(_, ign)| !ign).count();

    // Detections of this class, by descending score (stable), capped.
    let mut dets: Vec<(usize, &Detection)> =
        img.detections.iter().enumerate().filter(|(_, d)| d.class == class).collect();
    dets.sort_by(|a, b| b.1.score.partial_cmp(&a.1.score).unwrap().then(a.0.cmp(&b.0)));
    dets.truncate(max_det);

    let mut gt_taken = vec![false; gts.len()];
    let mut records = Vec::with_capacity(dets.len());
    for (rank, &(_, det)) in dets.iter().enumerate() {
        let mut best: Option<usize> = None;
        let mut best_iou = tau - MATCH_EPS;
        for (slot, &(g, ign)) in gts.iter().enumerate() {
            if gt_taken[slot] {
                continue;
            }
            // Once a real object is matched, never trade it for an
            // ignored one (in-range objects come first in `gts`).
            if ign {
                if let Some(b) = best {
                    if !gts[b].1 {
                        break;
                    }
                }
            }
            let iou = iou_pair(&det.bbox, &img.gt_boxes[g]);
            if iou > best_iou {
                best_iou = iou;
                best = Some(slot);
            }
        }
        match best {
            Some(slot) => {
                gt_taken[slot] = true;
                records.push(DetRecord {
                    score: det.score,
                    order: (image_index, rank),
                    tp: !gts[slot].1,
                    ignored: gts[slot].1,
                    iou: best_iou,
                });
            }
            None => records.push(DetRecord {
                score: det.score,
                order: (image_index, rank),
                tp: false,
                ignored: !in_range(&det.bbox),
                iou: 0.0,
            }),
        }
    }
    (records, n_pos)
}

/// Merged corpus records for one (class, τ, range), globally ordered by
/// descending score (ties broken by image then rank), plus the positive
/// count. Ignored records are dropped here — they affect matching only.
fn corpus_records(
    images: &[ImageEval],
    class: usize,
    tau: f64,
    range: Option<(f64, f64)>,
    max_det: usize,
) -> (Vec<DetRecord>, usize) {
    let mut records = Vec::new();
    let mut n_pos = 0;
    for (i, img) in images.iter().enumerate() {
        let (recs, pos) = match_image_class(i, img, class, tau, range, max_det);
        records.extend(recs.into_iter().filter(|r| !r.ignored));
        n_pos += pos;
    }
    records.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap().then(a.order.cmp(&b.order)));
    (records, n_pos)
}

/// 101-point interpolated average precision for one class at one τ; `None`
/// when the (range-filtered) corpus holds no object of the class.
fn class_ap(
    images: &[ImageEval],
    class: usize,
    tau: f64,
    range: Option<(f64, f64)>,
    max_det: usize,
) -> Option<f64> {
    let (records, n_pos) = corpus_records(images, class, tau, range, max_det);
    if n_pos == 0 {
        return None;
    }
    let mut precision = Vec::with_capacity(records.len());
    let mut recall = Vec::with_capacity(records.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for r in &records {
        if r.tp {
            tp += 1;
        } else {
            fp += 1;
        }
        precision.push(tp as f64 / (tp + fp) as f64);
        recall.push(tp as f64 / n_pos as f64);
    }
    // Monotone (right-to-left max) interpolation.
    for i in (1..precision.len()).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    let mut sum = 0.0;
    for i in 0..=100 {
        let r = i as f64 / 100.0;
        if let Some(j) = recall.iter().position(|&rec| rec >= r - 1e-12) {
            sum += precision[j];
        }
    }
    Some(sum / 101.0)
}

/// Mean AP over classes with ground truth at one τ (optionally restricted
/// to a √area range); `None` when no class qualifies.
pub fn ap_at(
    images: &[ImageEval],
    num_classes: usize,
    tau: f64,
    range: Option<(f64, f64)>,
    max_det: usize,
) -> Result<Option<f64>> {
    if num_classes == 0 {
        return Err(Error::Config("need at least one class".to_string()));
    }
    if !(0.0..1.0).contains(&tau) {
        return Err(Error::Config(format!("IoU threshold {tau} outside [0, 1)")));
    }
    if max_det == 0 {
        return Err(Error::Config("per-image detection cap must be positive".to_string()));
    }
    let vals: Vec<f64> =
        (0..num_classes).filter_map(|c| class_ap(images, c, tau, range, max_det)).collect();
    Ok(mean_of(&vals))
}

fn mean_of(vals: &[f64]) -> Option<f64> {
    if vals.is_empty() {
        None
    } else {
        Some(vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

/// Corpus-level average-precision summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApSummary {
    /// Mean over the ten IoU thresholds and all classes with objects.
    pub ap: Option<f64>,
    /// AP at IoU 0.50.
    pub ap50: Option<f64>,
    /// AP at IoU 0.75.
    pub ap75: Option<f64>,
    /// AP (all thresholds) restricted to each scale bucket; `None` where
    /// the bucket holds no objects.
    pub per_bucket: Vec<Option<f64>>,
    /// Objects in the corpus.
    pub num_gt: usize,
    /// Images in the corpus.
    pub num_images: usize,
}

/// Computes AP, AP50, AP75 and per-bucket AP in one pass over the corpus.
pub fn summarize_ap(
    images: &[ImageEval],
    num_classes: usize,
    buckets: &ScaleBuckets,
    max_det: usize,
) -> Result<ApSummary> {
    let taus = iou_thresholds();
    let mut overall = Vec::new();
    for &tau in &taus {
        if let Some(v) = ap_at(images, num_classes, tau, None, max_det)? {
            overall.push(v);
        }
    }
    let mut per_bucket = Vec::with_capacity(buckets.len());
    for b in 0..buckets.len() {
        let range = Some(buckets.range(b));
        let mut vals = Vec::new();
        for &tau in &taus {
            if let Some(v) = ap_at(images, num_classes, tau, range, max_det)? {
                vals.push(v);
            }
        }
        per_bucket.push(mean_of(&vals));
    }
    Ok(ApSummary {
        ap: mean_of(&overall),
        ap50: ap_at(images, num_classes, 0.5, None, max_det)?,
        ap75: ap_at(images, num_classes, 0.75, None, max_det)?,
        per_bucket,
        num_gt: images.iter().map(|i| i.gt_boxes.len()).sum(),
        num_images: images.len(),
    })
}

/// One class's optimal LRP: the score threshold minimizing the combined
/// localization / false-positive / false-negative error, and the error's
/// decomposition at that threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassLrp {
    /// Minimal LRP in [0, 1]; 0 only for perfect detection.
    pub olrp: f64,
    /// Mean localization error (1 − IoU)/(1 − τ) over kept true positives.
    pub loc: f64,
    /// False-positive rate among kept detections (1 − precision).
    pub fp: f64,
    /// False-negative rate over objects (1 − recall).
    pub fn_rate: f64,
    /// Optimal score cutoff; `None` means discarding every detection is
    /// optimal (ties prefer the higher threshold / fewer detections).
    pub threshold: Option<f64>,
}

/// Corpus LRP: per-class optima and their means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrpSummary {
    /// Mean optimal LRP over classes with objects.
    pub olrp: f64,
    /// Mean localization component.
    pub loc: f64,
    /// Mean false-positive component.
    pub fp: f64,
    /// Mean false-negative component.
    pub fn_rate: f64,
    /// Per-class detail; `None` for classes with no objects.
    pub per_class: Vec<Option<ClassLrp>>,
}

fn class_lrp(images: &[ImageEval], class: usize, tau: f64, max_det: usize) -> Option<ClassLrp> {
    let (records, n_pos) = corpus_records(images, class, tau, None, max_det);
    if n_pos == 0 {
        return None;
    }
    // Sweep prefixes of the score-ordered records; a prefix is a legal
    // cutoff only where the score strictly drops (ties must stay together).
    let mut best: Option<(f64, ClassLrp)> = None;
    let mut consider = |kept: usize, tp: usize, fp: usize, loc_sum: f64, threshold: Option<f64>| {
        let fn_count = n_pos - tp;
        let z = (tp + fp + fn_count) as f64;
        let lrp = (loc_sum + fp as f64 + fn_count as f64) / z;
        // Strict improvement required: earlier prefixes are smaller, i.e.
        // higher thresholds, and win ties.
        if best.as_ref().is_none_or(|(b, _)| lrp < *b - 1e-15) {
            let _ = kept;
            best = Some((
                lrp,
                ClassLrp {
                    olrp: lrp,
                    loc: if tp > 0 { loc_sum / tp as f64 } else { 0.0 },
                    fp: if tp + fp > 0 { fp as f64 / (tp + fp) as f64 } else { 0.0 },
                    fn_rate: fn_count as f64 / n_pos as f64,
                    threshold,
                },
            ));
        }
    };

    consider(0, 0, 0, 0.0, None);
    let (mut tp, mut fp, mut loc_sum) = (0usize, 0usize, 0.0f64);
    for (i, r) in records.iter().enumerate() {
        if r.tp {
            tp += 1;
            loc_sum += (1.0 - r.iou) / (1.0 - tau);
        } else {
            fp += 1;
        }
        let boundary = i + 1 == records.len() || records[i + 1].score < r.score;
        if boundary {
            consider(i + 1, tp, fp, loc_sum, Some(r.score));
        }
    }
    best.map(|(_, c)| c)
}

/// Optimal LRP at matching threshold `tau` (conventionally 0.5), averaged
/// over classes with objects; `None` when the corpus has no objects.
pub fn optimal_lrp(
    images: &[ImageEval],
    num_classes: usize,
    tau: f64,
    max_det: usize,
) -> Result<Option<LrpSummary>> {
    if num_classes == 0 {
        return Err(Error::Config("need at least one class".to_string()));
    }
    if !(0.0..1.0).contains(&tau) {
        return Err(Error::Config(format!("IoU threshold {tau} outside [0, 1)")));
    }
    if max_det == 0 {
        return Err(Error::Config("per-image detection cap must be positive".to_string()));
    }
    let per_class: Vec<Option<ClassLrp>> =
        (0..num_classes).map(|c| class_lrp(images, c, tau, max_det)).collect();
    let present: Vec<&ClassLrp> = per_class.iter().flatten().collect();
    if present.is_empty() {
        return Ok(None);
    }
    let n = present.len() as f64;
    Ok(Some(LrpSummary {
        olrp: present.iter().map(|c| c.olrp).sum::<f64>() / n,
        loc: present.iter().map(|c| c.loc).sum::<f64>() / n,
        fp: present.iter().map(|c| c.fp).sum::<f64>() / n,
        fn_rate: present.iter().map(|c| c.fn_rate).sum::<f64>() / n,
        per_class,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(bbox: [f64; 4], class: usize, score: f64) -> Detection {
        Detection { bbox, class, score }
    }

    fn one_image(dets: Vec<Detection>, gts: Vec<([f64; 4], usize)>) -> Vec<ImageEval> {
        let (gt_boxes, gt_classes) = gts.into_iter().unzip();
        vec![ImageEval { detections: dets, gt_boxes, gt_classes }]
    }

    #[test]
    fn perfect_detections_score_ap_one_and_lrp_zero() {
        let b1 = [10.0, 10.0, 6.0, 6.0];
        let b2 = [40.0, 40.0, 12.0, 12.0];
        let images = one_image(
            vec![det(b1, 0, 0.9), det(b2, 1, 0.8)],
            vec![(b1, 0), (b2, 1)],
        );
        let s = summarize_ap(&images, 2, &ScaleBuckets::reference(), 100).unwrap();
        assert_eq!(s.ap, Some(1.0));
        assert_eq!(s.ap50, Some(1.0));
        assert_eq!(s.ap75, Some(1.0));
        assert_eq!(s.num_gt, 2);
        let lrp = optimal_lrp(&images, 2, 0.5, 100).unwrap().unwrap();
        assert_eq!(lrp.olrp, 0.0);
        assert_eq!(lrp.loc, 0.0);
        assert_eq!(lrp.fp, 0.0);
        assert_eq!(lrp.fn_rate, 0.0);
    }

    #[test]
    fn single_detection_at_iou_point_six_scores_point_three() {
        // GT (0,0)-(10,10); detection shifted 2.5 right: IoU = 7.5·10 /
        // (200 − 75) = 0.6 exactly. Matched for τ ∈ {.50,.55,.60} only.
        let gt = [5.0, 5.0, 10.0, 10.0];
        let d = [7.5, 5.0, 10.0, 10.0];
        let images = one_image(vec![det(d, 0, 0.9)], vec![(gt, 0)]);
        let s = summarize_ap(&images, 1, &ScaleBuckets::reference(), 100).unwrap();
        assert_eq!(s.ap50, Some(1.0));
        assert_eq!(s.ap75, Some(0.0));
        assert!((s.ap.unwrap() - 0.3).abs() < 1e-12, "ap {:?}", s.ap);
    }

    #[test]
    fn duplicate_detection_is_a_false_positive_but_lrp_cuts_it() {
        let gt = [5.0, 5.0, 10.0, 10.0];
        let images =
            one_image(vec![det(gt, 0, 0.9), det(gt, 0, 0.8)], vec![(gt, 0)]);
        // Interpolated AP forgives the duplicate: recall 1 is reached at
        // precision 1 before the duplicate arrives.
        let ap50 = ap_at(&images, 1, 0.5, None, 100).unwrap().unwrap();
        assert_eq!(ap50, 1.0);
        // LRP does not: keeping both costs (0+1+0)/2; the optimum drops
        // the duplicate at threshold 0.9.
        let lrp = optimal_lrp(&images, 1, 0.5, 100).unwrap().unwrap();
        assert_eq!(lrp.olrp, 0.0);
        assert_eq!(lrp.per_class[0].unwrap().threshold, Some(0.9));
    }

    #[test]
    fn lrp_keeps_a_low_scoring_true_positive_despite_a_confident_false_positive() {
        // Two objects; one perfect but timid detection (score 0.5), one
        // confident miss (score 0.9). Keeping both: (0 + 1 + 1)/3 = 2/3.
        // Keeping only the top detection: (0 + 1 + 2)/3 = 1. Keeping none:
        // 2/2 = 1. So the optimum keeps both.
        let hit = [5.0, 5.0, 4.0, 4.0];
        let missed = [30.0, 30.0, 4.0, 4.0];
        let far = [60.0, 60.0, 4.0, 4.0];
        let images = one_image(
            vec![det(far, 0, 0.9), det(hit, 0, 0.5)],
            vec![(hit, 0), (missed, 0)],
        );
        let lrp = optimal_lrp(&images, 1, 0.5, 100).unwrap().unwrap();
        assert!((lrp.olrp - 2.0 / 3.0).abs() < 1e-12, "olrp {}", lrp.olrp);
        let c = lrp.per_class[0].unwrap();
        assert_eq!(c.threshold, Some(0.5));
        assert_eq!(c.loc, 0.0);
        assert_eq!(c.fp, 0.5);
        assert_eq!(c.fn_rate, 0.5);
    }

    #[test]
    fn no_detections_yield_pure_false_negative_error() {
        let images = one_image(Vec::new(), vec![([5.0, 5.0, 4.0, 4.0], 0)]);
        let lrp = optimal_lrp(&images, 1, 0.5, 100).unwrap().unwrap();
        assert_eq!(lrp.olrp, 1.0);
        assert_eq!(lrp.loc, 0.0);
        assert_eq!(lrp.fp, 0.0);
        assert_eq!(lrp.fn_rate, 1.0);
        assert_eq!(lrp.per_class[0].unwrap().threshold, None);
        // AP in the same situation is 0, not None.
        assert_eq!(ap_at(&images, 1, 0.5, None, 100).unwrap(), Some(0.0));
    }

    #[test]
    fn empty_corpus_has_no_scores() {
        let images = one_image(vec![det([1.0, 1.0, 1.0, 1.0], 0, 0.5)], Vec::new());
        assert_eq!(ap_at(&images, 1, 0.5, None, 100).unwrap(), None);
        assert!(optimal_lrp(&images, 1, 0.5, 100).unwrap().is_none());
    }

    #[test]
    fn bucket_boundaries_are_inclusive_below_exclusive_above() {
        let b = ScaleBuckets::reference();
        assert_eq!(b.bucket_of(1.9), None);
        assert_eq!(b.bucket_of(2.0), Some(0));
        assert_eq!(b.bucket_of(7.999), Some(0));
        assert_eq!(b.bucket_of(8.0), Some(1));
        assert_eq!(b.bucket_of(12.7), Some(1));
        assert_eq!(b.bucket_of(16.0), Some(2));
        assert_eq!(b.bucket_of(32.0), Some(3));
        assert_eq!(b.bucket_of(63.999), Some(3));
        assert_eq!(b.bucket_of(64.0), None);
        assert_eq!(b.name(0), "vt");
        assert_eq!(b.name(3), "m");
        assert!(ScaleBuckets::new(vec![4.0]).is_err());
        assert!(ScaleBuckets::new(vec![4.0, 4.0]).is_err());
        assert!(ScaleBuckets::new(vec![-1.0, 4.0]).is_err());
    }

    #[test]
    fn bucketed_ap_ignores_out_of_range_objects_and_their_detections() {
        // One tiny object (√area 6) and one medium (√area 40), both
        // perfectly detected.
        let tiny = [10.0, 10.0, 6.0, 6.0];
        let medium = [50.0, 50.0, 40.0, 40.0];
        let images = one_image(
            vec![det(tiny, 0, 0.9), det(medium, 0, 0.8)],
            vec![(tiny, 0), (medium, 0)],
        );
        let s = summarize_ap(&images, 1, &ScaleBuckets::reference(), 100).unwrap();
        assert_eq!(s.per_bucket[0], Some(1.0), "vt bucket holds the tiny object");
        assert_eq!(s.per_bucket[1], None, "t bucket is empty");
        assert_eq!(s.per_bucket[2], None);
        assert_eq!(s.per_bucket[3], Some(1.0), "m bucket holds the medium object");
    }

    #[test]
    fn detection_cap_drops_low_scoring_detections() {
        let gt = [5.0, 5.0, 4.0, 4.0];
        let far = [40.0, 40.0, 4.0, 4.0];
        // The true positive scores lowest, so a cap of 1 keeps only the
        // false positive. Uncapped, the curve reaches recall 1 at
        // precision 1/2.
        let images = one_image(vec![det(far, 0, 0.9), det(gt, 0, 0.4)], vec![(gt, 0)]);
        assert_eq!(ap_at(&images, 1, 0.5, None, 100).unwrap(), Some(0.5));
        let capped = ap_at(&images, 1, 0.5, None, 1).unwrap().unwrap();
        assert_eq!(capped, 0.0);
    }

    #[test]
    fn score_ties_resolve_deterministically() {
        let gt = [5.0, 5.0, 4.0, 4.0];
        let near = [5.5, 5.0, 4.0, 4.0];
        let images = one_image(vec![det(near, 0, 0.7), det(gt, 0, 0.7)], vec![(gt, 0)]);
        // Both score 0.7: insertion order decides; the first (near) match
        // wins the object, the exact one becomes the duplicate.
        let (recs, n_pos) = corpus_records(&images, 0, 0.5, None, 100);
        assert_eq!(n_pos, 1);
        assert_eq!(recs.len(), 2);
        assert!(recs[0].tp && !recs[1].tp);
        assert!(recs[0].iou < 1.0);
    }

    #[test]
    fn classes_average_independently() {
        // Class 0 perfectly detected, class 1 entirely missed.
        let a = [10.0, 10.0, 6.0, 6.0];
        let b = [30.0, 30.0, 6.0, 6.0];
        let images = one_image(vec![det(a, 0, 0.9)], vec![(a, 0), (b, 1)]);
        let ap = ap_at(&images, 2, 0.5, None, 100).unwrap().unwrap();
        assert_eq!(ap, 0.5);
        // A class that never appears in ground truth does not dilute.
        let ap3 = ap_at(&images, 3, 0.5, None, 100).unwrap().unwrap();
        assert_eq!(ap3, 0.5);
    }

    #[test]
    fn recall_accumulates_across_images() {
        let b = [5.0, 5.0, 4.0, 4.0];
        let mut images = one_image(vec![det(b, 0, 0.9)], vec![(b, 0)]);
        images.extend(one_image(Vec::new(), vec![(b, 0)]));
        // One of two objects found: precision 1 up to recall 0.5, then 0.
        let ap = ap_at(&images, 1, 0.5, None, 100).unwrap().unwrap();
        assert!((ap - 51.0 / 101.0).abs() < 1e-12, "ap {ap}");
    }

    #[test]
    fn validation_rejects_bad_parameters() {
        let images = one_image(Vec::new(), Vec::new());
        assert!(ap_at(&images, 0, 0.5, None, 100).is_err());
        assert!(ap_at(&images, 1, 1.0, None, 100).is_err());
        assert!(ap_at(&images, 1, 0.5, None, 0).is_err());
        assert!(optimal_lrp(&images, 0, 0.5, 100).is_err());
        assert!(optimal_lrp(&images, 1, -0.1, 100).is_err());
        assert!(optimal_lrp(&images, 1, 0.5, 0).is_err());
    }

    /// Deterministic pseudo-random corpus for property checks.
    fn random_corpus(seed: u64) -> Vec<ImageEval> {
        let mut state = seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(12345);
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 16) as f64 / (1u64 << 48) as f64
        };
        let mut images = Vec::new();
        for _ in 0..3 {
            let n_gt = 1 + (next() * 4.0) as usize;
            let mut gt_boxes = Vec::new();
            let mut gt_classes = Vec::new();
            for _ in 0..n_gt {
                gt_boxes.push([
                    10.0 + next() * 80.0,
                    10.0 + next() * 80.0,
                    3.0 + next() * 10.0,
                    3.0 + next() * 10.0,
                ]);
                gt_classes.push((next() * 2.0) as usize);
            }
            let n_det = (next() * 6.0) as usize;
            let mut detections = Vec::new();
            for _ in 0..n_det {
                // Half the detections hover near an object, half are noise.
                let bbox = if next() < 0.5 && !gt_boxes.is_empty() {
                    let g: &[f64; 4] = &gt_boxes[(next() * gt_boxes.len() as f64) as usize];
                    [g[0] + next() - 0.5, g[1] + next() - 0.5, g[2], g[3]]
                } else {
                    [10.0 + next() * 80.0, 10.0 + next() * 80.0, 3.0 + next() * 10.0, 3.0 + next() * 10.0]
                };
                detections.push(det(bbox, (next() * 2.0) as usize, 0.05 + next() * 0.9));
            }
            images.push(ImageEval { detections, gt_boxes, gt_classes });
        }
        images
    }

    #[test]
    fn removing_a_false_positive_never_lowers_ap() {
        let mut trials = 0;
        for seed in 0..200 {
            let images = random_corpus(seed);
            // Find some image with a false positive under τ = 0.5.
            let mut fp_loc = None;
            'outer: for (i, img) in images.iter().enumerate() {
                for class in 0..2 {
                    let (recs, _) = match_image_class(i, img, class, 0.5, None, 100);
                    if let Some(r) = recs.iter().find(|r| !r.tp && !r.ignored) {
                        // Map the record back to the detection by score.
                        let d = img
                            .detections
                            .iter()
                            .position(|d| d.class == class && d.score == r.score)
                            .unwrap();
                        fp_loc = Some((i, d));
                        break 'outer;
                    }
                }
            }
            let Some((img_idx, det_idx)) = fp_loc else { continue };
            let before = ap_at(&images, 2, 0.5, None, 100).unwrap();
            let mut pruned = images.clone();
            pruned[img_idx].detections.remove(det_idx);
            let after = ap_at(&pruned, 2, 0.5, None, 100).unwrap();
            match (before, after) {
                (Some(b), Some(a)) => {
                    assert!(a >= b - 1e-12, "seed {seed}: AP fell from {b} to {a}")
                }
                (b, a) => assert_eq!(b, a),
            }
            trials += 1;
        }
        assert!(trials >= 100, "only {trials} corpora had a false positive");
    }

    #[test]
    fn scores_stay_within_unit_interval() {
        for seed in 0..120 {
            let images = random_corpus(seed + 1000);
            if let Some(ap) = ap_at(&images, 2, 0.5, None, 100).unwrap() {
                assert!((0.0..=1.0).contains(&ap), "seed {seed}: ap {ap}");
            }
            if let Some(lrp) = optimal_lrp(&images, 2, 0.5, 100).unwrap() {
                assert!((0.0..=1.0).contains(&lrp.olrp), "seed {seed}: olrp {}", lrp.olrp);
                assert!((0.0..=1.0).contains(&lrp.loc));
                assert!((0.0..=1.0).contains(&lrp.fp));
                assert!((0.0..=1.0).contains(&lrp.fn_rate));
            }
        }
    }
}
