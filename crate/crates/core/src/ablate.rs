//! Ablation studies over the pipeline's switchable components.
//!
//! Every study trains variant models on the same corpus pair (derived from
//! the base experiment's seed) and scores them on the same held-out set,
//! so rows differ only in the component under test. Studies are fully
//! deterministic: rerunning one reproduces its table bit for bit.

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::model::{CountingMode, ModelConfig};
use crate::train::{evaluate, train, EvalReport};

/// One trained-and-scored variant.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    /// Variant label.
    pub name: String,
    /// Training loss at the final step.
    pub final_loss: f64,
    /// Held-out evaluation.
    pub report: EvalReport,
}

/// A completed study.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationTable {
    /// Which study produced this table.
    pub study: String,
    /// One row per variant, in a fixed order.
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    /// Renders the table as aligned plain text.
    pub fn render(&self) -> String {
        let mut out = format!("study: {}\n", self.study);
        out.push_str(&format!(
            "{:<36} {:>7} {:>7} {:>7} {:>9} {:>9} {:>10}\n",
            "variant", "AP", "AP50", "oLRP", "count-acc", "queries", "final-loss"
        ));
        for row in &self.rows {
            let fmt_opt = |v: Option<f64>| match v {
                Some(v) => format!("{v:.3}"),
                None => "-".to_string(),
            };
            out.push_str(&format!(
                "{:<36} {:>7} {:>7} {:>7} {:>9} {:>9.1} {:>10.3}\n",
                row.name,
                fmt_opt(row.report.ap.ap),
                fmt_opt(row.report.ap.ap50),
                fmt_opt(row.report.lrp.as_ref().map(|l| l.olrp)),
                fmt_opt(row.report.counting_accuracy),
                row.report.mean_queries,
                row.final_loss,
            ));
        }
        out
    }
}

/// Trains and scores one variant of the base experiment.
fn run_variant(base: &ExperimentConfig, name: &str, model: ModelConfig) -> Result<AblationRow> {
    let config = ExperimentConfig {
        model,
        ..base.clone()
    };
    config.validate()?;
    let mut detector = config.build_model()?;
    let record = train(&mut detector, &config.train_dataset()?, &config.training, None)?;
    let report = evaluate(&detector, &config.eval_dataset()?, &config.eval)?;
    Ok(AblationRow {
        name: name.to_string(),
        final_loss: record.final_loss,
        report,
    })
}

/// The component grid: nothing, counting with dynamic budgets, counting
/// with feature gating, and the full pipeline. The baseline row uses the
/// base config's fixed query count.
pub fn component_grid(base: &ExperimentConfig) -> Result<AblationTable> {
    let variants: [(&str, bool, bool, bool); 4] = [
        ("baseline", false, false, false),
        ("counting+dynamic_queries", true, false, true),
        ("counting+gating", true, true, false),
        ("counting+gating+dynamic_queries", true, true, true),
    ];
    let rows = variants
        .iter()
        .map(|&(name, counting, gating, dynamic)| {
            let model = ModelConfig {
                use_counting: counting,
                use_enhancement: gating,
                use_dynamic_queries: dynamic,
                ..base.model.clone()
            };
            run_variant(base, name, model)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationTable {
        study: "components".to_string(),
        rows,
    })
}

/// Classification- versus regression-style counting, all other components
/// as in the base config.
pub fn counting_modes(base: &ExperimentConfig) -> Result<AblationTable> {
    let rows = [
        ("classification", CountingMode::Classification),
        ("regression", CountingMode::Regression),
    ]
    .iter()
    .map(|&(name, mode)| {
        let model = ModelConfig {
            counting_mode: mode,
            ..base.model.clone()
        };
        run_variant(base, name, model)
    })
    .collect::<Result<Vec<_>>>()?;
    Ok(AblationTable {
        study: "counting_mode".to_string(),
        rows,
    })
}

/// Count-level granularity: each variant supplies its own cutpoints and
/// budgets (budgets must have one more entry than cuts).
pub fn count_level_variants(
    base: &ExperimentConfig,
    variants: &[(Vec<f64>, Vec<usize>)],
) -> Result<AblationTable> {
    if variants.is_empty() {
        return Err(Error::Config("no count-level variants given".to_string()));
    }
    let rows = variants
        .iter()
        .map(|(cuts, budgets)| {
            let model = ModelConfig {
                count_cuts: cuts.clone(),
                query_budgets: budgets.clone(),
                ..base.model.clone()
            };
            run_variant(base, &format!("levels{}", cuts.len() + 1), model)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationTable {
        study: "count_levels".to_string(),
        rows,
    })
}

/// Fixed query budgets against the dynamic policy: one row per fixed `k`
/// (dynamic budgets off, counting kept for its auxiliary loss), plus the
/// base dynamic configuration for contrast.
pub fn fixed_budget_sweep(base: &ExperimentConfig, budgets: &[usize]) -> Result<AblationTable> {
    if budgets.is_empty() {
        return Err(Error::Config("no fixed budgets given".to_string()));
    }
    let mut rows = Vec::with_capacity(budgets.len() + 1);
    for &k in budgets {
        let model = ModelConfig {
            use_dynamic_queries: false,
            fixed_queries: k,
            ..base.model.clone()
        };
        rows.push(run_variant(base, &format!("fixed_k{k}"), model)?);
    }
    rows.push(run_variant(base, "dynamic", base.model.clone())?);
    Ok(AblationTable {
        study: "query_budget".to_string(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::DataConfig;
    use crate::data::{CountModel, SceneSpec};
    use crate::train::TrainConfig;

    /// A base experiment small enough for studies to run in test time.
    fn tiny_base() -> ExperimentConfig {
        ExperimentConfig {
            seed: 5,
            model: ModelConfig {
                width: 8,
                heads: 2,
                encoder_layers: 1,
                decoder_layers: 1,
                density_hidden: 8,
                gate_reduction: 2,
                query_budgets: vec![4, 6, 8, 10],
                fixed_queries: 6,
                ..ModelConfig::default()
            },
            training: TrainConfig {
                stage1_steps: 2,
                stage2_steps: 3,
                ..TrainConfig::default()
            },
            data: DataConfig {
                train_images: 3,
                eval_images: 2,
                scene: SceneSpec {
                    image_size: 32,
                    counts: CountModel::Fixed { count: 3 },
                    ..SceneSpec::default()
                },
            },
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn component_grid_isolates_each_branch() {
        let table = component_grid(&tiny_base()).unwrap();
        assert_eq!(table.study, "components");
        let names: Vec<&str> = table.rows.iter().map(|r| r.name.as_str()).collect();
        assert_eq!(
            names,
            vec![
                "baseline",
                "counting+dynamic_queries",
                "counting+gating",
                "counting+gating+dynamic_queries"
            ]
        );
        // The baseline has no counting branch, so no accuracy and the
        // fixed query count; counting rows report accuracy.
        assert!(table.rows[0].report.counting_accuracy.is_none());
        assert_eq!(table.rows[0].report.mean_queries, 6.0);
        for row in &table.rows[1..] {
            assert!(row.report.counting_accuracy.is_some(), "{}", row.name);
        }
        // Fixed-count corpus of 3 sits in level 1 ⇒ budget 6 when the
        // dynamic rows predict correctly; regardless, budgets stay in range.
        for row in &table.rows {
            assert!(row.report.mean_queries >= 4.0 && row.report.mean_queries <= 10.0);
            assert!(row.final_loss.is_finite());
        }
        let rendered = table.render();
        assert!(rendered.contains("baseline"));
        assert!(rendered.contains("variant"));
    }

    #[test]
    fn studies_are_deterministic() {
        let a = counting_modes(&tiny_base()).unwrap();
        let b = counting_modes(&tiny_base()).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        assert_eq!(a.rows[0].name, "classification");
        assert_eq!(a.rows[1].name, "regression");
    }

    #[test]
    fn level_variants_and_budget_sweep_shape_their_tables() {
        let base = tiny_base();
        let table = count_level_variants(
            &base,
            &[
                (vec![1.0, 10.0, 50.0], vec![4, 6, 8, 10]),
                (vec![1.0, 10.0, 50.0, 90.0], vec![4, 6, 8, 10, 12]),
            ],
        )
        .unwrap();
        assert_eq!(table.rows.len(), 2);
        assert_eq!(table.rows[0].name, "levels4");
        assert_eq!(table.rows[1].name, "levels5");

        let sweep = fixed_budget_sweep(&base, &[4, 8]).unwrap();
        assert_eq!(sweep.rows.len(), 3);
        assert_eq!(sweep.rows[0].name, "fixed_k4");
        assert_eq!(sweep.rows[1].name, "fixed_k8");
        assert_eq!(sweep.rows[2].name, "dynamic");
        assert_eq!(sweep.rows[0].report.mean_queries, 4.0);
        assert_eq!(sweep.rows[1].report.mean_queries, 8.0);

        assert!(count_level_variants(&base, &[]).is_err());
        assert!(fixed_budget_sweep(&base, &[]).is_err());
    }
}
