//! Optimizers, the two-stage training loop, and corpus evaluation.
//!
//! Training runs in two stages. The warm-up stage updates only what the
//! counting loss reaches — backbone, encoder and density head — so the
//! count-level prediction that later picks query budgets is sensible
//! before boxes are ever supervised. The main stage then trains the whole
//! pipeline: Hungarian-matched detection losses on every decoder layer,
//! the counting loss, and a focal term on the dense selection scores so
//! good positions rise to the top-k.
//!
//! Updates are purely functional — the optimizer replaces parameter
//! tensors rather than mutating them — so a step can never corrupt a
//! graph that still references the old values.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::init::ParamVisitor;
use crate::matching::{focal_loss, total_loss, GroundTruth, LossBreakdown, MatchWeights};
use crate::metrics::{optimal_lrp, summarize_ap, ApSummary, ImageEval, LrpSummary, ScaleBuckets};
use crate::model::DetectionModel;
use crate::tensor::{no_grad, Tensor};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const SGD_MOMENTUM: f64 = 0.9;

/// Update rule selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Adam (β₁ = 0.9, β₂ = 0.999) with bias correction.
    Adam,
    /// Stochastic gradient descent with momentum 0.9.
    Sgd,
}

/// Name-keyed optimizer state over a [`ParamVisitor`] component.
///
/// Only parameters that received a gradient are updated; parameters a
/// stage's loss never touches keep their values and accumulate no stale
/// state.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    grad_clip: Option<f64>,
    steps: usize,
    first_moment: HashMap<String, Vec<f64>>,
    second_moment: HashMap<String, Vec<f64>>,
}

impl Optimizer {
    /// Creates an optimizer with the given learning rate and optional
    /// global gradient-norm clip.
    pub fn new(kind: OptimizerKind, lr: f64, grad_clip: Option<f64>) -> Result<Optimizer> {
        if !(lr.is_finite() && lr > 0.0) {
            return Err(Error::Config(format!("learning rate {lr} must be positive")));
        }
        if let Some(c) = grad_clip {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::Config(format!("gradient clip {c} must be positive")));
            }
        }
        Ok(Optimizer {
            kind,
            lr,
            grad_clip,
            steps: 0,
            first_moment: HashMap::new(),
            second_moment: HashMap::new(),
        })
    }

    /// Updates every parameter of `component` that has a gradient, then
    /// leaves the replaced parameters gradient-free. Fails on non-finite
    /// gradients.
    pub fn step<M: ParamVisitor>(&mut self, component: &mut M) -> Result<()> {
        // Pass 1: gather gradients and the global norm.
        let mut grads: HashMap<String, Vec<f64>> = HashMap::new();
        let mut sq_norm = 0.0;
        let mut bad: Option<String> = None;
        component.visit_params("model", &mut |name, t| {
            if let Some(g) = t.grad() {
                for &v in &g {
                    if !v.is_finite() {
                        bad.get_or_insert_with(|| name.clone());
                    }
                    sq_norm += v * v;
                }
                grads.insert(name, g);
            }
        });
        if let Some(name) = bad {
            return Err(Error::NonFinite {
                context: format!("gradient of {name}"),
            });
        }
        if grads.is_empty() {
            return Err(Error::Config(
                "optimizer step with no gradients; was backward() run?".to_string(),
            ));
        }
        let scale = match self.grad_clip {
            Some(clip) if sq_norm.sqrt() > clip => clip / sq_norm.sqrt(),
            _ => 1.0,
        };

        self.steps += 1;
        let t = self.steps as f64;
        let kind = self.kind;
        let lr = self.lr;
        let mut failure: Option<Error> = None;

        // Pass 2: replace each updated parameter with a fresh tensor.
        component.visit_params("model", &mut |name, slot| {
            if failure.is_some() {
                return;
            }
            let Some(grad) = grads.get(&name) else { return };
            let n = grad.len();
            let mut data = slot.data().to_vec();
            match kind {
                OptimizerKind::Adam => {
                    let m = self.first_moment.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
                    let v = self.second_moment.entry(name).or_insert_with(|| vec![0.0; n]);
                    let m_corr = 1.0 - ADAM_BETA1.powf(t);
                    let v_corr = 1.0 - ADAM_BETA2.powf(t);
                    for i in 0..n {
                        let g = grad[i] * scale;
                        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
                        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
                        let m_hat = m[i] / m_corr;
                        let v_hat = v[i] / v_corr;
                        data[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                    }
                }
                OptimizerKind::Sgd => {
                    let buf = self.first_moment.entry(name).or_insert_with(|| vec![0.0; n]);
                    for i in 0..n {
                        buf[i] = SGD_MOMENTUM * buf[i] + grad[i] * scale;
                        data[i] -= lr * buf[i];
                    }
                }
            }
            match Tensor::param(slot.shape(), data) {
                Ok(fresh) => *slot = fresh,
                Err(e) => failure = Some(e),
            }
        });
        match failure {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}

/// Labels dense score-map positions for selection supervision. A position
/// is positive for the smallest ground-truth box whose interior contains
/// its cell center (equal areas break toward the earlier box); positions
/// inside no box are background. Returns `(flat_position, class)` pairs.
pub fn selection_targets(
    level_dims: &[(usize, usize)],
    gt: &GroundTruth,
) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut flat = 0;
    for &(h, w) in level_dims {
        for y in 0..h {
            for x in 0..w {
                let cx = (x as f64 + 0.5) / w as f64;
                let cy = (y as f64 + 0.5) / h as f64;
                let mut best: Option<(f64, usize)> = None;
                for (i, b) in gt.boxes().iter().enumerate() {
                    let inside =
                        (cx - b[0]).abs() <= b[2] / 2.0 && (cy - b[1]).abs() <= b[3] / 2.0;
                    if inside {
                        let area = b[2] * b[3];
                        if best.is_none_or(|(a, _)| area < a) {
                            best = Some((area, i));
                        }
                    }
                }
                if let Some((_, i)) = best {
                    out.push((flat, gt.classes()[i]));
                }
                flat += 1;
            }
        }
    }
    out
}

/// Focal loss on the dense selection scores against containment-assigned
/// targets, normalized by the object count and scaled by the
/// classification weight.
pub fn selection_loss(
    scores: &Tensor,
    level_dims: &[(usize, usize)],
    gt: &GroundTruth,
    weights: &MatchWeights,
) -> Result<Tensor> {
    let positives = selection_targets(level_dims, gt);
    let raw = focal_loss(scores, &positives, weights.alpha, weights.gamma)?;
    raw.mul_scalar(weights.focal / gt.len().max(1) as f64)
}

/// Training-loop settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Counting warm-up steps (skipped entirely when the model has no
    /// counting branch).
    pub stage1_steps: usize,
    /// Full-pipeline steps.
    pub stage2_steps: usize,
    /// Update rule.
    pub optimizer: OptimizerKind,
    /// Learning rate.
    pub learning_rate: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Snapshot cadence for the rolling last-good checkpoint, in steps.
    pub checkpoint_every: usize,
    /// A loss beyond this magnitude counts as divergence even while still
    /// finite (layer norms can keep an exploding model finite for a long
    /// time).
    pub divergence_threshold: f64,
    /// Detection-loss weights (also shape the selection focal term).
    pub weights: MatchWeights,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            stage1_steps: 200,
            stage2_steps: 400,
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-3,
            grad_clip: Some(1.0),
            checkpoint_every: 50,
            divergence_threshold: 1e6,
            weights: MatchWeights::default(),
        }
    }
}

/// One optimizer step's worth of diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Zero-based step index over the whole run.
    pub step: usize,
    /// 1 = counting warm-up, 2 = full pipeline.
    pub stage: u8,
    /// The optimized loss value.
    pub loss: f64,
    /// Detection-loss components (stage 2 only).
    pub breakdown: Option<LossBreakdown>,
    /// Selection focal term (stage 2 only).
    pub selection: Option<f64>,
    /// Queries used (stage 2 only).
    pub queries: Option<usize>,
    /// Predicted count level, when the counting branch is on.
    pub predicted_level: Option<usize>,
    /// Ground-truth count level, when the counting branch is on.
    pub target_level: Option<usize>,
}

/// Deterministic record of a training run. Contains no wall-clock or
/// host-dependent data, so identical runs serialize identically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    /// Architecture hash of the trained model.
    pub arch_hash: String,
    /// Warm-up steps actually run.
    pub stage1_steps: usize,
    /// Full-pipeline steps actually run.
    pub stage2_steps: usize,
    /// Per-step diagnostics.
    pub steps: Vec<StepRecord>,
    /// Loss at the final step.
    pub final_loss: f64,
    /// Rolling checkpoint written last, if a directory was given.
    pub last_checkpoint: Option<PathBuf>,
}

/// Trains `model` on `dataset`, cycling through its images in order.
///
/// When `checkpoint_dir` is given, a rolling `last_good.ckpt` is written
/// every [`TrainConfig::checkpoint_every`] steps. A non-finite loss or
/// gradient aborts with [`Error::Divergence`] naming that checkpoint.
pub fn train(
    model: &mut DetectionModel,
    dataset: &Dataset,
    config: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<RunRecord> {
    if dataset.is_empty() {
        return Err(Error::Config("cannot train on an empty corpus".to_string()));
    }
    if config.checkpoint_every == 0 {
        return Err(Error::Config("checkpoint cadence must be at least one step".to_string()));
    }
    if config.divergence_threshold.is_nan() || config.divergence_threshold <= 0.0 {
        return Err(Error::Config("divergence threshold must be positive".to_string()));
    }
    let mut optimizer = Optimizer::new(config.optimizer, config.learning_rate, config.grad_clip)?;

    let stage1 = if model.config().use_counting {
        config.stage1_steps
    } else {
        if config.stage1_steps > 0 {
            log::info!(
                "skipping {} counting warm-up steps: model has no counting branch",
                config.stage1_steps
            );
        }
        0
    };
    let total_steps = stage1 + config.stage2_steps;
    if total_steps == 0 {
        return Err(Error::Config("training needs at least one step".to_string()));
    }

    let ckpt_path = checkpoint_dir.map(|d| d.join("last_good.ckpt"));
    let mut last_checkpoint: Option<PathBuf> = None;
    let mut records: Vec<StepRecord> = Vec::with_capacity(total_steps);

    for step in 0..total_steps {
        let scene = dataset.image(step % dataset.len())?;
        let gt_count = scene.gt.len();
        let target_level = model
            .thresholds()
            .map(|t| t.count_to_level(gt_count as f64).0);

        let outcome: Result<(Tensor, StepRecord)> = if step < stage1 {
            model.counting_forward(&scene.image).and_then(|output| {
                let loss = model.count_loss_for(&output, gt_count)?;
                let value = loss.item()?;
                let record = StepRecord {
                    step,
                    stage: 1,
                    loss: value,
                    breakdown: None,
                    selection: None,
                    queries: None,
                    predicted_level: Some(model.infer_level(&output)?.0),
                    target_level,
                };
                Ok((loss, record))
            })
        } else {
            model.forward(&scene.image).and_then(|output| {
                let counting = model.counting_term(&output, gt_count)?;
                let bundle = total_loss(
                    &output.decoder,
                    &scene.gt,
                    counting.as_ref(),
                    &config.weights,
                )?;
                let selection = selection_loss(
                    &output.queries.scores,
                    &output.level_dims,
                    &scene.gt,
                    &config.weights,
                )?;
                let selection_value = selection.item()?;
                let loss = bundle.loss.add(&selection)?;
                let value = loss.item()?;
                let record = StepRecord {
                    step,
                    stage: 2,
                    loss: value,
                    breakdown: Some(bundle.breakdown),
                    selection: Some(selection_value),
                    queries: Some(output.num_queries()),
                    predicted_level: output.predicted_level.map(|l| l.0),
                    target_level,
                };
                Ok((loss, record))
            })
        };

        // Divergence check before the update: a blown-up model must not
        // overwrite whatever it learned. Non-finite values anywhere — in
        // the forward pass, the loss, or the gradients — and finite losses
        // past the threshold both count.
        let diverged = |loss: f64| Error::Divergence {
            step,
            loss,
            last_good: last_checkpoint.clone(),
        };
        let (loss, record) = match outcome {
            Ok(x) => x,
            Err(Error::NonFinite { .. }) => return Err(diverged(f64::NAN)),
            Err(e) => return Err(e),
        };
        if !record.loss.is_finite() || record.loss.abs() > config.divergence_threshold {
            return Err(diverged(record.loss));
        }
        match loss.backward().and_then(|()| optimizer.step(model)) {
            Ok(()) => {}
            Err(Error::NonFinite { .. }) => return Err(diverged(record.loss)),
            Err(e) => return Err(e),
        }
        records.push(record);

        if let Some(path) = &ckpt_path {
            if (step + 1) % config.checkpoint_every == 0 {
                model.save(path)?;
                last_checkpoint = Some(path.clone());
            }
        }
    }

    Ok(RunRecord {
        arch_hash: model.config().arch_hash(),
        stage1_steps: stage1,
        stage2_steps: config.stage2_steps,
        final_loss: records.last().map_or(f64::NAN, |r| r.loss),
        steps: records,
        last_checkpoint,
    })
}

/// Evaluation settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    /// Per-image, per-class detection cap.
    pub max_det: usize,
    /// Scale-bucket edges in pixels (√area).
    pub scale_edges: Vec<f64>,
}

impl Default for EvalOptions {
    fn default() -> EvalOptions {
        EvalOptions {
            max_det: 100,
            scale_edges: vec![2.0, 8.0, 16.0, 32.0, 64.0],
        }
    }
}

/// Corpus-level evaluation results.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    /// Average precision summary (pixel scale).
    pub ap: ApSummary,
    /// Optimal localization-recall-precision summary at IoU 0.5; `None`
    /// when the corpus has no objects.
    pub lrp: Option<LrpSummary>,
    /// Fraction of images whose predicted count level matches the binned
    /// ground-truth count; `None` without a counting branch.
    pub counting_accuracy: Option<f64>,
    /// Mean queries per image.
    pub mean_queries: f64,
}

/// Runs `model` over every image of `dataset` and scores it. Boxes are
/// converted from the unit square to pixel scale before matching.
pub fn evaluate(
    model: &DetectionModel,
    dataset: &Dataset,
    options: &EvalOptions,
) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::Config("cannot evaluate an empty corpus".to_string()));
    }
    no_grad(|| {
        let extent = dataset.spec().image_size as f64;
        let num_classes = dataset.spec().num_classes;
        let mut evals = Vec::with_capacity(dataset.len());
        let mut level_hits = 0usize;
        let mut query_sum = 0usize;
        let mut counting_on = false;
        for i in 0..dataset.len() {
            let scene = dataset.image(i)?;
            let output = model.forward(&scene.image)?;
            query_sum += output.num_queries();
            if let (Some(pred), Some(thresholds)) = (output.predicted_level, model.thresholds()) {
                counting_on = true;
                if pred == thresholds.count_to_level(scene.gt.len() as f64) {
                    level_hits += 1;
                }
            }
            let detections = output.detections(extent)?;
            let gt_boxes = scene
                .gt
                .boxes()
                .iter()
                .map(|b| [b[0] * extent, b[1] * extent, b[2] * extent, b[3] * extent])
                .collect();
            evals.push(ImageEval {
                detections,
                gt_boxes,
                gt_classes: scene.gt.classes().to_vec(),
            });
        }
        let buckets = ScaleBuckets::new(options.scale_edges.clone())?;
        let ap = summarize_ap(&evals, num_classes, &buckets, options.max_det)?;
        let lrp = optimal_lrp(&evals, num_classes, 0.5, options.max_det)?;
        Ok(EvalReport {
            ap,
            lrp,
            counting_accuracy: counting_on
                .then(|| level_hits as f64 / dataset.len() as f64),
            mean_queries: query_sum as f64 / dataset.len() as f64,
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{CountModel, SceneSpec};
    use crate::model::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// A lone trainable tensor, for exercising the optimizer directly.
    struct Holder {
        t: Tensor,
    }

    impl ParamVisitor for Holder {
        fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
            f(format!("{prefix}.t"), &mut self.t);
        }
    }

    fn quadratic(h: &Holder, target: &[f64]) -> Tensor {
        let t = Tensor::from_vec(&[target.len()], target.to_vec()).unwrap();
        let diff = h.t.add(&t.mul_scalar(-1.0).unwrap()).unwrap();
        diff.mul(&diff).unwrap().sum_all().unwrap()
    }

    #[test]
    fn adam_converges_on_a_quadratic() {
        let mut h = Holder {
            t: Tensor::param(&[3], vec![5.0, -2.0, 0.3]).unwrap(),
        };
        let target = [1.0, 2.0, -1.0];
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.05, None).unwrap();
        for _ in 0..500 {
            let loss = quadratic(&h, &target);
            loss.backward().unwrap();
            opt.step(&mut h).unwrap();
        }
        let final_loss = quadratic(&h, &target).item().unwrap();
        assert!(final_loss < 1e-6, "loss still {final_loss}");
    }

    #[test]
    fn sgd_converges_on_a_quadratic() {
        let mut h = Holder {
            t: Tensor::param(&[2], vec![3.0, -3.0]).unwrap(),
        };
        let target = [0.5, 0.5];
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.02, None).unwrap();
        for _ in 0..300 {
            let loss = quadratic(&h, &target);
            loss.backward().unwrap();
            opt.step(&mut h).unwrap();
        }
        let final_loss = quadratic(&h, &target).item().unwrap();
        assert!(final_loss < 1e-6, "loss still {final_loss}");
    }

    #[test]
    fn adam_first_step_matches_the_formula() {
        // Loss 3t ⇒ gradient 3. After one bias-corrected step the update
        // is lr · g / (|g| + ε), independent of the gradient scale.
        let mut h = Holder {
            t: Tensor::param(&[1], vec![2.0]).unwrap(),
        };
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.1, None).unwrap();
        let loss = h.t.mul_scalar(3.0).unwrap().sum_all().unwrap();
        loss.backward().unwrap();
        opt.step(&mut h).unwrap();
        let expected = 2.0 - 0.1 * 3.0 / (3.0 + ADAM_EPS);
        assert!((h.t.data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn gradient_clipping_bounds_the_sgd_update() {
        // Gradient norm 1000 clipped to 1 ⇒ first update is exactly lr.
        let mut h = Holder {
            t: Tensor::param(&[1], vec![0.0]).unwrap(),
        };
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.5, Some(1.0)).unwrap();
        let loss = h.t.mul_scalar(1000.0).unwrap().sum_all().unwrap();
        loss.backward().unwrap();
        opt.step(&mut h).unwrap();
        assert!((h.t.data()[0] - (-0.5)).abs() < 1e-12);
    }

    #[test]
    fn optimizer_rejects_bad_settings_and_missing_gradients() {
        assert!(Optimizer::new(OptimizerKind::Adam, 0.0, None).is_err());
        assert!(Optimizer::new(OptimizerKind::Adam, 0.1, Some(-1.0)).is_err());
        let mut h = Holder {
            t: Tensor::param(&[1], vec![0.0]).unwrap(),
        };
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.1, None).unwrap();
        assert!(opt.step(&mut h).is_err());
    }

    #[test]
    fn selection_targets_use_containment_and_smallest_area() {
        // One 4×4 level; a centered 0.3×0.3 box covers the middle four
        // cells (centers at 0.375 and 0.625).
        let gt = GroundTruth::new(vec![[0.5, 0.5, 0.3, 0.3]], vec![2]).unwrap();
        let targets = selection_targets(&[(4, 4)], &gt);
        assert_eq!(targets, vec![(5, 2), (6, 2), (9, 2), (10, 2)]);

        // A smaller box nested inside claims the cells it contains.
        let gt = GroundTruth::new(
            vec![[0.5, 0.5, 0.8, 0.8], [0.375, 0.375, 0.3, 0.3]],
            vec![0, 1],
        )
        .unwrap();
        let targets = selection_targets(&[(4, 4)], &gt);
        let of_class_1: Vec<usize> =
            targets.iter().filter(|&&(_, c)| c == 1).map(|&(p, _)| p).collect();
        assert_eq!(of_class_1, vec![5]); // cell (1,1) center (0.375, 0.375)
        assert!(targets.contains(&(6, 0)));
        assert!(targets.len() > 4);

        // No boxes: everything is background.
        assert!(selection_targets(&[(4, 4)], &GroundTruth::default()).is_empty());
    }

    fn tiny_model_config() -> ModelConfig {
        ModelConfig {
            width: 8,
            heads: 2,
            encoder_layers: 1,
            decoder_layers: 2,
            density_hidden: 8,
            gate_reduction: 2,
            query_budgets: vec![4, 6, 8, 10],
            fixed_queries: 6,
            ..ModelConfig::default()
        }
    }

    fn tiny_dataset(seed: u64, len: usize) -> Dataset {
        let spec = SceneSpec {
            image_size: 32,
            counts: CountModel::Fixed { count: 3 },
            ..SceneSpec::default()
        };
        Dataset::new(spec, seed, len).unwrap()
    }

    fn tiny_train_config() -> TrainConfig {
        TrainConfig {
            stage1_steps: 3,
            stage2_steps: 5,
            checkpoint_every: 4,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn training_runs_both_stages_and_checkpoints() {
        let dir = std::env::temp_dir().join("tinydet-train-test");
        std::fs::create_dir_all(&dir).unwrap();

        let mut model =
            DetectionModel::init(tiny_model_config(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let dataset = tiny_dataset(9, 4);
        let record = train(&mut model, &dataset, &tiny_train_config(), Some(&dir)).unwrap();

        assert_eq!(record.steps.len(), 8);
        assert_eq!(record.stage1_steps, 3);
        assert!(record.steps[..3].iter().all(|r| r.stage == 1 && r.breakdown.is_none()));
        assert!(record.steps[3..].iter().all(|r| r.stage == 2));
        for r in &record.steps {
            assert!(r.loss.is_finite());
            assert_eq!(r.target_level, Some(1)); // 3 objects, cuts {1,10,50}
        }
        let stage2 = &record.steps[4];
        assert!(stage2.queries.is_some());
        let b = stage2.breakdown.as_ref().unwrap();
        assert!(b.counting > 0.0);
        assert!(record.last_checkpoint.as_ref().unwrap().exists());
        assert_eq!(record.final_loss, record.steps.last().unwrap().loss);

        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn warm_up_is_skipped_without_a_counting_branch() {
        let config = ModelConfig {
            use_counting: false,
            use_enhancement: false,
            use_dynamic_queries: false,
            ..tiny_model_config()
        };
        let mut model = DetectionModel::init(config, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let dataset = tiny_dataset(9, 4);
        let record = train(&mut model, &dataset, &tiny_train_config(), None).unwrap();
        assert_eq!(record.stage1_steps, 0);
        assert_eq!(record.steps.len(), 5);
        assert!(record.steps.iter().all(|r| r.stage == 2));
        assert!(record.steps.iter().all(|r| r.predicted_level.is_none()));
        assert!(record
            .steps
            .iter()
            .all(|r| r.breakdown.as_ref().unwrap().counting == 0.0));
    }

    #[test]
    fn identical_runs_produce_identical_records_and_weights() {
        let run = || {
            let mut model =
                DetectionModel::init(tiny_model_config(), &mut ChaCha8Rng::seed_from_u64(4))
                    .unwrap();
            let dataset = tiny_dataset(9, 4);
            let record = train(&mut model, &dataset, &tiny_train_config(), None).unwrap();
            let params = crate::init::collect_params(&mut model, "model");
            (record, params)
        };
        let (record_a, params_a) = run();
        let (record_b, params_b) = run();
        assert_eq!(record_a, record_b);
        assert_eq!(
            serde_json::to_string(&record_a).unwrap(),
            serde_json::to_string(&record_b).unwrap()
        );
        for ((name_a, a), (name_b, b)) in params_a.iter().zip(&params_b) {
            assert_eq!(name_a, name_b);
            assert_eq!(a.data(), b.data(), "{name_a} differs between runs");
        }
    }

    #[test]
    fn divergence_is_reported_with_the_last_good_checkpoint() {
        let dir = std::env::temp_dir().join("tinydet-diverge-test");
        std::fs::create_dir_all(&dir).unwrap();

        let mut model =
            DetectionModel::init(tiny_model_config(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let dataset = tiny_dataset(9, 4);
        let config = TrainConfig {
            stage1_steps: 0,
            stage2_steps: 50,
            learning_rate: 1e12,
            grad_clip: None,
            checkpoint_every: 1,
            ..TrainConfig::default()
        };
        match train(&mut model, &dataset, &config, Some(&dir)) {
            Err(Error::Divergence { step, loss, last_good }) => {
                assert!(step > 0, "first step should survive");
                assert!(loss.is_nan() || loss.abs() > 1e6, "reported loss {loss}");
                let path = last_good.expect("checkpointed every step before diverging");
                assert!(path.exists());
                // The snapshot must still be loadable.
                DetectionModel::load(&path, tiny_model_config()).unwrap();
            }
            other => panic!("expected divergence, got {other:?}"),
        }
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn evaluation_reports_all_sections() {
        let mut model =
            DetectionModel::init(tiny_model_config(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let dataset = tiny_dataset(9, 3);
        let config = TrainConfig {
            stage1_steps: 2,
            stage2_steps: 2,
            ..tiny_train_config()
        };
        train(&mut model, &dataset, &config, None).unwrap();

        let report = evaluate(&model, &dataset, &EvalOptions::default()).unwrap();
        assert_eq!(report.ap.num_images, 3);
        assert_eq!(report.ap.num_gt, 9);
        let accuracy = report.counting_accuracy.unwrap();
        assert!((0.0..=1.0).contains(&accuracy));
        assert!(report.mean_queries >= 4.0 && report.mean_queries <= 10.0);
        if let Some(ap) = report.ap.ap {
            assert!((0.0..=1.0).contains(&ap));
        }
        if let Some(lrp) = &report.lrp {
            assert!((0.0..=1.0).contains(&lrp.olrp));
        }
    }

    #[test]
    fn training_rejects_degenerate_setups() {
        let mut model =
            DetectionModel::init(tiny_model_config(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let dataset = tiny_dataset(9, 2);
        let no_steps = TrainConfig {
            stage1_steps: 0,
            stage2_steps: 0,
            ..TrainConfig::default()
        };
        assert!(train(&mut model, &dataset, &no_steps, None).is_err());
        let bad_cadence = TrainConfig {
            checkpoint_every: 0,
            ..tiny_train_config()
        };
        assert!(train(&mut model, &dataset, &bad_cadence, None).is_err());
    }
}
