//! Categorical counting: density features, count-level classification and
//! the level → query-budget tables.
//!
//! Rather than regressing an exact object count, images are binned into a
//! small number of *count levels* by thresholds on the instance count
//! (reference scale: ≤10, ≤100, ≤500, >500). A density head reads the
//! finest feature map through a stack of dilated convolutions and
//! classifies the level; the predicted level picks the query budget used by
//! the decoder.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init::{xavier, zeros, ParamVisitor};
use crate::tensor::{PoolKind, Tensor};

/// A count level; 0 is the sparsest bin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CountLevel(pub usize);

/// Ascending instance-count cutpoints separating the levels.
///
/// `count_to_level` returns the number of cuts strictly below the count, so
/// a count equal to a cut stays in the lower level (count 10 with reference
/// cuts {10,100,500} is level 0; 501 is level 3).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct LevelThresholds {
    cuts: Vec<f64>,
}

impl LevelThresholds {
    /// Validates that cuts are finite, positive and strictly ascending.
    pub fn new(cuts: Vec<f64>) -> Result<LevelThresholds> {
        if cuts.is_empty() {
            return Err(Error::Config("thresholds need at least one cut".to_string()));
        }
        for pair in cuts.windows(2) {
            // NaN fails the ordering test and is rejected here too.
            if pair[0].partial_cmp(&pair[1]) != Some(std::cmp::Ordering::Less) {
                return Err(Error::Config(format!(
                    "threshold cuts must ascend strictly, got {:?}",
                    cuts
                )));
            }
        }
        if cuts.iter().any(|c| !c.is_finite() || *c <= 0.0) {
            return Err(Error::Config(format!(
                "threshold cuts must be finite and positive, got {:?}",
                cuts
            )));
        }
        Ok(LevelThresholds { cuts })
    }

    /// Reference-scale cuts {10, 100, 500} (four levels).
    pub fn reference() -> LevelThresholds {
        LevelThresholds {
            cuts: vec![10.0, 100.0, 500.0],
        }
    }

    /// The cutpoints.
    pub fn cuts(&self) -> &[f64] {
        &self.cuts
    }

    /// Number of levels (`cuts + 1`).
    pub fn num_levels(&self) -> usize {
        self.cuts.len() + 1
    }

    /// Bins an instance count into its level. Counts equal to a cut fall in
    /// the lower level.
    pub fn count_to_level(&self, count: f64) -> CountLevel {
        CountLevel(self.cuts.iter().filter(|&&c| count > c).count())
    }
}

impl TryFrom<Vec<f64>> for LevelThresholds {
    type Error = Error;
    fn try_from(cuts: Vec<f64>) -> Result<Self> {
        LevelThresholds::new(cuts)
    }
}

impl From<LevelThresholds> for Vec<f64> {
    fn from(t: LevelThresholds) -> Vec<f64> {
        t.cuts
    }
}

/// Query budget per count level (monotone nondecreasing).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct QueryBudget {
    budgets: Vec<usize>,
}

impl QueryBudget {
    /// Validates that budgets are positive and nondecreasing level to level.
    pub fn new(budgets: Vec<usize>) -> Result<QueryBudget> {
        if budgets.is_empty() {
            return Err(Error::Config("budget table is empty".to_string()));
        }
        if budgets[0] == 0 || budgets.windows(2).any(|p| p[1] < p[0]) {
            return Err(Error::Config(format!(
                "budgets must be positive and nondecreasing, got {:?}",
                budgets
            )));
        }
        Ok(QueryBudget { budgets })
    }

    /// Reference-scale budgets {300, 500, 900, 1500}.
    pub fn reference() -> QueryBudget {
        QueryBudget {
            budgets: vec![300, 500, 900, 1500],
        }
    }

    /// The per-level budgets.
    pub fn budgets(&self) -> &[usize] {
        &self.budgets
    }

    /// Number of levels covered.
    pub fn num_levels(&self) -> usize {
        self.budgets.len()
    }

    /// Queries allotted to a level.
    pub fn level_to_budget(&self, level: CountLevel) -> Result<usize> {
        self.budgets.get(level.0).copied().ok_or_else(|| {
            Error::Config(format!(
                "level {} outside budget table of {} levels",
                level.0,
                self.budgets.len()
            ))
        })
    }
}

impl TryFrom<Vec<usize>> for QueryBudget {
    type Error = Error;
    fn try_from(budgets: Vec<usize>) -> Result<Self> {
        QueryBudget::new(budgets)
    }
}

impl From<QueryBudget> for Vec<usize> {
    fn from(b: QueryBudget) -> Vec<usize> {
        b.budgets
    }
}

/// Derives three cutpoints (four levels) from a corpus of instance counts:
/// `{m − dev, m, m + dev}` with `m` the mean and `dev` the population
/// standard deviation (or the variance when `use_variance` is set).
///
/// Degenerate statistics are repaired deterministically: the middle cut
/// stays at the mean while the outer cuts are pushed at least 1 away, and
/// everything is clamped to ≥ 1 preserving strict ascent. A corpus of all
/// equal counts `c` therefore yields `{c−1, c, c+1}` (or `{1, 2, 3}` when
/// `c = 1`).
pub fn derive_thresholds(counts: &[usize], use_variance: bool) -> Result<LevelThresholds> {
    if counts.is_empty() {
        return Err(Error::Config("cannot derive thresholds from no counts".to_string()));
    }
    let n = counts.len() as f64;
    let mean = counts.iter().map(|&c| c as f64).sum::<f64>() / n;
    let var = counts
        .iter()
        .map(|&c| {
            let d = c as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    let dev = if use_variance { var } else { var.sqrt() };

    let mut c0 = (mean - dev).min(mean - 1.0);
    let mut c1 = mean;
    let mut c2 = (mean + dev).max(mean + 1.0);
    if c0 < 1.0 {
        c0 = 1.0;
    }
    if c1 <= c0 {
        c1 = c0 + 1.0;
    }
    if c2 <= c1 {
        c2 = c1 + 1.0;
    }
    LevelThresholds::new(vec![c0, c1, c2])
}

/// Density head: dilated-conv feature extractor plus a two-layer level
/// classifier. Operates on the finest pyramid level.
#[derive(Debug, Clone)]
pub struct DensityHead {
    // Three 3×3 convs with dilations 1, 2, 3; padding equals dilation, so
    // the spatial extent is preserved while the receptive field grows.
    convs: Vec<(Tensor, Tensor)>,
    // Classifier: d → hidden → num_levels over the spatially pooled feature.
    fc1: (Tensor, Tensor),
    fc2: (Tensor, Tensor),
}

/// Dilation schedule of the extractor convolutions.
const DILATIONS: [usize; 3] = [1, 2, 3];

impl DensityHead {
    /// Initializes for `d`-channel maps, a `hidden`-wide classifier and
    /// `num_levels` outputs. A single output acts as a scalar regression
    /// head instead of per-level logits.
    pub fn init(d: usize, hidden: usize, num_levels: usize, rng: &mut ChaCha8Rng) -> Result<DensityHead> {
        if d == 0 || hidden == 0 || num_levels == 0 {
            return Err(Error::Config(format!(
                "density head needs d ≥ 1, hidden ≥ 1 and ≥ 1 output (got d={d}, hidden={hidden}, outputs={num_levels})"
            )));
        }
        let mut convs = Vec::with_capacity(DILATIONS.len());
        for _ in DILATIONS {
            convs.push((xavier(&[d, d, 3, 3], d * 9, d * 9, rng)?, zeros(&[d])?));
        }
        Ok(DensityHead {
            convs,
            fc1: (xavier(&[hidden, d], d, hidden, rng)?, zeros(&[hidden])?),
            fc2: (xavier(&[num_levels, hidden], hidden, num_levels, rng)?, zeros(&[num_levels])?),
        })
    }

    /// Number of count levels the classifier separates.
    pub fn num_levels(&self) -> usize {
        self.fc2.0.shape()[0]
    }

    /// Extracts the density feature from the finest map, preserving shape:
    /// `[d, h, w] → [d, h, w]`.
    pub fn extract_density(&self, map: &Tensor) -> Result<Tensor> {
        let (d, h, w) = match *map.shape() {
            [d, h, w] => (d, h, w),
            ref other => {
                return Err(Error::shape(
                    "extract_density",
                    format!("expected [d,h,w] map, got {:?}", other),
                ))
            }
        };
        let mut x = map.reshape(&[1, d, h, w])?;
        for ((weight, bias), dilation) in self.convs.iter().zip(DILATIONS) {
            x = x.conv2d(weight, Some(bias), 1, dilation, dilation)?.relu()?;
        }
        x.reshape(&[d, h, w])
    }

    /// Classifies a density feature into per-level logits `[num_levels]`.
    pub fn classify_level(&self, density: &Tensor) -> Result<Tensor> {
        let (d, h, w) = match *density.shape() {
            [d, h, w] => (d, h, w),
            ref other => {
                return Err(Error::shape(
                    "classify_level",
                    format!("expected [d,h,w] density, got {:?}", other),
                ))
            }
        };
        let pooled = density
            .reshape(&[1, d, h, w])?
            .pool_spatial(PoolKind::Avg)?
            .reshape(&[1, d])?;
        let hidden = pooled.linear(&self.fc1.0, Some(&self.fc1.1))?.relu()?;
        let logits = hidden.linear(&self.fc2.0, Some(&self.fc2.1))?;
        logits.reshape(&[self.num_levels()])
    }
}

impl ParamVisitor for DensityHead {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (i, (weight, bias)) in self.convs.iter_mut().enumerate() {
            f(format!("{prefix}.conv{i}.weight"), weight);
            f(format!("{prefix}.conv{i}.bias"), bias);
        }
        f(format!("{prefix}.fc1.weight"), &mut self.fc1.0);
        f(format!("{prefix}.fc1.bias"), &mut self.fc1.1);
        f(format!("{prefix}.fc2.weight"), &mut self.fc2.0);
        f(format!("{prefix}.fc2.bias"), &mut self.fc2.1);
    }
}

/// Level predicted from logits: argmax, ties broken toward the lower level.
pub fn predicted_level(logits: &Tensor) -> Result<CountLevel> {
    if logits.shape().len() != 1 || logits.numel() == 0 {
        return Err(Error::shape(
            "predicted_level",
            format!("expected non-empty rank-1 logits, got {:?}", logits.shape()),
        ));
    }
    let mut best = 0;
    for (i, &v) in logits.data().iter().enumerate() {
        if v > logits.data()[best] {
            best = i;
        }
    }
    Ok(CountLevel(best))
}

/// Cross-entropy between level logits and the true level (softmax over
/// levels, log-sum-exp stabilized by the max logit).
pub fn counting_loss(logits: &Tensor, target: CountLevel) -> Result<Tensor> {
    let levels = match *logits.shape() {
        [l] => l,
        ref other => {
            return Err(Error::shape(
                "counting_loss",
                format!("expected rank-1 logits, got {:?}", other),
            ))
        }
    };
    if target.0 >= levels {
        return Err(Error::Config(format!(
            "target level {} outside {} levels",
            target.0, levels
        )));
    }
    let max = logits.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits
        .add_scalar(-max)?
        .exp()?
        .sum_all()?
        .ln()?
        .add_scalar(max)?;
    let picked = logits.reshape(&[levels, 1])?.gather_rows(&[target.0])?.reshape(&[1])?;
    lse.sub(&picked)
}

/// Squared error between a scalar count prediction and the true count in
/// log space: `(v − ln(1 + n))²`. The log transform tames the heavy
///-tailed count range.
pub fn regression_loss(output: &Tensor, count: usize) -> Result<Tensor> {
    if output.numel() != 1 {
        return Err(Error::shape(
            "regression_loss",
            format!("expected a scalar count prediction, got {:?}", output.shape()),
        ));
    }
    let target = (1.0 + count as f64).ln();
    let diff = output.reshape(&[1])?.add_scalar(-target)?;
    diff.mul(&diff)
}

/// Level implied by a scalar log-space count prediction: the prediction is
/// mapped back through `expm1` (clamped at zero) and binned.
pub fn regression_level(output: &Tensor, thresholds: &LevelThresholds) -> Result<CountLevel> {
    if output.numel() != 1 {
        return Err(Error::shape(
            "regression_level",
            format!("expected a scalar count prediction, got {:?}", output.shape()),
        ));
    }
    let v = output.data()[0];
    if !v.is_finite() {
        return Err(Error::NonFinite { context: format!("count regression output {v}") });
    }
    Ok(thresholds.count_to_level(v.exp_m1().max(0.0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn reference_boundaries_bin_inclusively() {
        let t = LevelThresholds::reference();
        let cases = [
            (0.0, 0),
            (1.0, 0),
            (10.0, 0),
            (11.0, 1),
            (100.0, 1),
            (101.0, 2),
            (500.0, 2),
            (501.0, 3),
            (2267.0, 3),
        ];
        for (count, level) in cases {
            assert_eq!(t.count_to_level(count), CountLevel(level), "count {count}");
        }
    }

    #[test]
    fn desk_scale_boundaries() {
        let t = LevelThresholds::new(vec![1.0, 10.0, 50.0]).unwrap();
        for (count, level) in [(1.0, 0), (2.0, 1), (10.0, 1), (11.0, 2), (50.0, 2), (51.0, 3)] {
            assert_eq!(t.count_to_level(count), CountLevel(level), "count {count}");
        }
    }

    #[test]
    fn thresholds_reject_non_ascending_or_non_positive() {
        assert!(LevelThresholds::new(vec![]).is_err());
        assert!(LevelThresholds::new(vec![10.0, 10.0]).is_err());
        assert!(LevelThresholds::new(vec![100.0, 10.0]).is_err());
        assert!(LevelThresholds::new(vec![0.0, 10.0]).is_err());
        assert!(LevelThresholds::new(vec![f64::NAN, 10.0]).is_err());
    }

    #[test]
    fn budget_lookup_and_validation() {
        let b = QueryBudget::reference();
        assert_eq!(b.level_to_budget(CountLevel(0)).unwrap(), 300);
        assert_eq!(b.level_to_budget(CountLevel(3)).unwrap(), 1500);
        assert!(b.level_to_budget(CountLevel(4)).is_err());
        assert!(QueryBudget::new(vec![]).is_err());
        assert!(QueryBudget::new(vec![0, 10]).is_err());
        assert!(QueryBudget::new(vec![100, 50]).is_err());
    }

    #[test]
    fn level_and_budget_are_monotone_in_count() {
        let t = LevelThresholds::reference();
        let b = QueryBudget::reference();
        let mut prev_level = CountLevel(0);
        let mut prev_budget = 0;
        for n in 0..=3000 {
            let level = t.count_to_level(n as f64);
            let budget = b.level_to_budget(level).unwrap();
            assert!(level >= prev_level, "level dropped at n={n}");
            assert!(budget >= prev_budget, "budget dropped at n={n}");
            prev_level = level;
            prev_budget = budget;
        }
    }

    #[test]
    fn derive_thresholds_matches_direct_statistics() {
        let counts: Vec<usize> = (1..=100).collect();
        let t = derive_thresholds(&counts, false).unwrap();
        let mean = 50.5;
        let var = counts
            .iter()
            .map(|&c| (c as f64 - mean) * (c as f64 - mean))
            .sum::<f64>()
            / 100.0;
        let std = var.sqrt();
        let cuts = t.cuts();
        assert!((cuts[0] - (mean - std)).abs() < 1e-9);
        assert!((cuts[1] - mean).abs() < 1e-9);
        assert!((cuts[2] - (mean + std)).abs() < 1e-9);
        // Variance toggle widens the bracket and clamps the low cut at 1.
        let tv = derive_thresholds(&counts, true).unwrap();
        assert_eq!(tv.cuts()[0], 1.0);
        assert!((tv.cuts()[2] - (mean + var)).abs() < 1e-9);
    }

    #[test]
    fn derive_thresholds_repairs_degenerate_corpora() {
        // All-equal counts: {c-1, c, c+1}.
        let t = derive_thresholds(&[7; 50], false).unwrap();
        assert_eq!(t.cuts(), &[6.0, 7.0, 8.0]);
        // All ones: clamped to {1, 2, 3}.
        let t = derive_thresholds(&[1; 10], false).unwrap();
        assert_eq!(t.cuts(), &[1.0, 2.0, 3.0]);
        // Single observation behaves like all-equal.
        let t = derive_thresholds(&[2], false).unwrap();
        assert_eq!(t.cuts(), &[1.0, 2.0, 3.0]);
        assert!(derive_thresholds(&[], false).is_err());
    }

    #[test]
    fn derived_thresholds_always_feed_count_to_level() {
        // Whatever corpus we derive from, binning its own counts never
        // panics and levels stay in range.
        for seed in 0..20u64 {
            let counts: Vec<usize> = (0..50)
                .map(|i| ((seed * 31 + i) * 2654435761 % 97 + 1) as usize)
                .collect();
            let t = derive_thresholds(&counts, seed % 2 == 0).unwrap();
            for &c in &counts {
                assert!(t.count_to_level(c as f64).0 <= 3);
            }
        }
    }

    #[test]
    fn density_preserves_shape_and_zero_input_is_constant() {
        let head = DensityHead::init(8, 16, 4, &mut rng()).unwrap();
        let map = Tensor::zeros(&[8, 6, 6]);
        let density = head.extract_density(&map).unwrap();
        assert_eq!(density.shape(), &[8, 6, 6]);
        // Zero input exercises only biases; each channel plane is constant.
        for ch in 0..8 {
            let plane: Vec<f64> = (0..36).map(|p| density.data()[ch * 36 + p]).collect();
            for v in &plane {
                assert!((v - plane[0]).abs() < 1e-12);
                assert!(v.is_finite());
            }
        }
    }

    #[test]
    fn classifier_emits_per_level_logits() {
        let head = DensityHead::init(8, 16, 5, &mut rng()).unwrap();
        let density = head
            .extract_density(&Tensor::full(&[8, 4, 4], 0.3))
            .unwrap();
        let logits = head.classify_level(&density).unwrap();
        assert_eq!(logits.shape(), &[5]);
        assert!(logits.is_finite());
    }

    #[test]
    fn predicted_level_breaks_ties_low() {
        let logits = Tensor::from_vec(&[4], vec![1.0, 3.0, 3.0, 2.0]).unwrap();
        assert_eq!(predicted_level(&logits).unwrap(), CountLevel(1));
        let flat = Tensor::zeros(&[4]);
        assert_eq!(predicted_level(&flat).unwrap(), CountLevel(0));
    }

    #[test]
    fn counting_loss_uniform_logits_is_ln_levels() {
        let logits = Tensor::zeros(&[4]);
        let loss = counting_loss(&logits, CountLevel(2)).unwrap();
        assert!((loss.item().unwrap() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn counting_loss_vanishes_for_confident_correct_logit() {
        let logits = Tensor::from_vec(&[4], vec![0.0, 50.0, 0.0, 0.0]).unwrap();
        let loss = counting_loss(&logits, CountLevel(1)).unwrap();
        assert!(loss.item().unwrap() < 1e-12);
        // And grows for a confidently wrong one.
        let wrong = counting_loss(&logits, CountLevel(0)).unwrap();
        assert!(wrong.item().unwrap() > 10.0);
    }

    #[test]
    fn counting_loss_rejects_out_of_range_target() {
        let logits = Tensor::zeros(&[4]);
        assert!(counting_loss(&logits, CountLevel(4)).is_err());
    }

    #[test]
    fn gradients_flow_through_extractor_and_loss() {
        let head = DensityHead::init(4, 8, 4, &mut rng()).unwrap();
        let map = Tensor::from_vec(&[4, 4, 4], (0..64).map(|i| (i as f64 * 0.13).sin()).collect())
            .unwrap();
        let report = grad_check("density head", &[map], 1e-5, |t| {
            let density = head.extract_density(&t[0])?;
            let logits = head.classify_level(&density)?;
            counting_loss(&logits, CountLevel(1))
        })
        .unwrap();
        assert!(
            report.max_rel_error < 1e-4,
            "max rel error {}",
            report.max_rel_error
        );
    }

    #[test]
    fn regression_loss_matches_hand_value() {
        // Output predicts ln(1 + 7) exactly: loss must be zero.
        let exact = Tensor::from_vec(&[1], vec![(8.0f64).ln()]).unwrap();
        assert!(regression_loss(&exact, 7).unwrap().item().unwrap() < 1e-15);

        // Hand value: (0.5 - ln(1 + 3))^2.
        let off = Tensor::from_vec(&[1], vec![0.5]).unwrap();
        let expected = (0.5 - (4.0f64).ln()).powi(2);
        let got = regression_loss(&off, 3).unwrap().item().unwrap();
        assert!((got - expected).abs() < 1e-12, "got {got}, want {expected}");
    }

    #[test]
    fn regression_loss_gradient_matches_finite_differences() {
        let output = Tensor::from_vec(&[1], vec![1.3]).unwrap();
        let report =
            grad_check("regression loss", &[output], 1e-5, |t| regression_loss(&t[0], 12))
                .unwrap();
        assert!(report.max_rel_error < 1e-6);
    }

    #[test]
    fn regression_level_round_trips_through_thresholds() {
        let thresholds = LevelThresholds::new(vec![10.0, 100.0, 500.0]).unwrap();
        // ln(1 + 250) decodes to a count of 250, which sits in level 2.
        let output = Tensor::from_vec(&[1], vec![(251.0f64).ln()]).unwrap();
        assert_eq!(regression_level(&output, &thresholds).unwrap(), CountLevel(2));
        // Strongly negative outputs clamp to a count of zero: level 0.
        let negative = Tensor::from_vec(&[1], vec![-40.0]).unwrap();
        assert_eq!(regression_level(&negative, &thresholds).unwrap(), CountLevel(0));
    }

    #[test]
    fn regression_level_rejects_non_finite_output() {
        let thresholds = LevelThresholds::new(vec![10.0]).unwrap();
        let bad = Tensor::from_vec(&[1], vec![f64::NAN]).unwrap();
        assert!(regression_level(&bad, &thresholds).is_err());
    }
}
