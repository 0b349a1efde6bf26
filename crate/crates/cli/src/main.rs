//! Command-line harness: corpus generation, training, evaluation,
//! ablation studies, numeric gradient checks and artifact reports.
//!
//! Exit codes: 0 success, 2 usage, 3 configuration, 4 data/parse/numeric,
//! 5 training divergence, 6 I/O.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tinydet_core::ablate::{
    component_grid, count_level_variants, counting_modes, fixed_budget_sweep, AblationTable,
};
use tinydet_core::config::ExperimentConfig;
use tinydet_core::counting::{counting_loss, CountLevel, DensityHead};
use tinydet_core::data::{annotations_for, write_annotations, write_tdim};
use tinydet_core::enhance::FeatureGates;
use tinydet_core::matching::{layer_assignments, matched_loss, GroundTruth, MatchWeights};
use tinydet_core::model::{DetectionModel, ModelConfig};
use tinydet_core::tensor::{grad_check, GradCheckReport};
use tinydet_core::train::{evaluate, selection_loss, train, EvalReport, RunRecord};
use tinydet_core::{Error, Tensor};

/// Writes to stdout, treating a closed pipe (e.g. `tinydet ... | head`) as
/// a clean exit rather than a panic.
fn write_stdout(args: std::fmt::Arguments<'_>, newline: bool) {
    use std::io::{ErrorKind, Write};
    let mut stdout = std::io::stdout().lock();
    let res = if newline {
        writeln!(stdout, "{args}")
    } else {
        write!(stdout, "{args}")
    };
    if let Err(e) = res {
        if e.kind() == ErrorKind::BrokenPipe {
            std::process::exit(0);
        }
        eprintln!("error: {e}");
        std::process::exit(6);
    }
}

macro_rules! outln {
    ($($arg:tt)*) => { write_stdout(format_args!($($arg)*), true) };
}

macro_rules! outp {
    ($($arg:tt)*) => { write_stdout(format_args!($($arg)*), false) };
}

#[derive(Parser)]
#[command(
    name = "tinydet",
    version,
    about = "Detection pipeline with instance counting, density-guided feature gating \
             and count-dependent query budgets"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic corpus to disk: raw image tensors plus a JSON
    /// annotation file.
    GenerateData {
        /// Experiment TOML.
        #[arg(long)]
        config: PathBuf,
        /// Output directory (created if missing).
        #[arg(long)]
        out: PathBuf,
        /// Which corpus to render.
        #[arg(long, value_enum, default_value_t = Split::Train)]
        split: Split,
    },
    /// Train a model; writes `model.ckpt`, `run.json` and a rolling
    /// `last_good.ckpt` into the output directory.
    Train {
        /// Experiment TOML.
        #[arg(long)]
        config: PathBuf,
        /// Output directory (created if missing).
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a trained checkpoint on the held-out corpus.
    Eval {
        /// Experiment TOML; its model section must match the checkpoint.
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint produced by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Emit the full report as JSON instead of text.
        #[arg(long)]
        json: bool,
    },
    /// Train and score a family of model variants.
    Ablate {
        /// Experiment TOML used as the base for every variant.
        #[arg(long)]
        config: PathBuf,
        /// Which study to run.
        #[arg(long, value_enum)]
        study: Study,
        /// Also write the table as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Verify analytic gradients against central differences for each
    /// model component and for the fully assembled loss. A probe landing
    /// within a step of a kink (max pooling, ReLU) is retried from a
    /// shifted point; systematic errors fail from every probe point.
    GradCheck {
        /// Seed for weights and probe data.
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Largest acceptable relative error.
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        /// Central-difference step. Much smaller steps trade truncation
        /// error for cancellation noise on near-zero gradient elements.
        #[arg(long, default_value_t = 1e-4)]
        eps: f64,
    },
    /// Summarize a JSON artifact: a run record, an evaluation report or
    /// an ablation table.
    Report {
        /// File produced by `train`, `eval --json` or `ablate --out`.
        #[arg(long)]
        file: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Eval,
}

#[derive(Clone, Copy, ValueEnum)]
enum Study {
    /// Baseline, counting with dynamic budgets, counting with gating, and
    /// the full pipeline.
    Components,
    /// Classification- versus regression-style counting.
    CountingMode,
    /// The configured count levels versus one extra level.
    CountLevels,
    /// Each configured budget as a fixed query count, versus dynamic.
    BudgetSweep,
}

/// Attaches the offending path to a bare I/O error so `error: No such
/// file or directory` becomes actionable.
fn with_path<T>(res: Result<T, Error>, path: &Path) -> Result<T, Error> {
    res.map_err(|e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(
            io.kind(),
            format!("{}: {io}", path.display()),
        )),
        other => other,
    })
}

fn load_config(path: &Path) -> Result<ExperimentConfig, Error> {
    with_path(ExperimentConfig::load(path), path)
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::TomlDe(_) | Error::TomlSer(_) | Error::HashMismatch { .. } => 3,
        Error::Parse { .. } | Error::Json(_) | Error::Shape { .. } | Error::NonFinite { .. } => 4,
        Error::Divergence { .. } => 5,
        Error::Io(_) => 6,
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(err) = run(cli.command) {
        eprintln!("error: {err}");
        std::process::exit(exit_code(&err));
    }
}

fn run(command: Command) -> Result<(), Error> {
    match command {
        Command::GenerateData { config, out, split } => generate_data(&config, &out, split),
        Command::Train { config, out } => run_train(&config, &out),
        Command::Eval {
            config,
            checkpoint,
            json,
        } => run_eval(&config, &checkpoint, json),
        Command::Ablate { config, study, out } => run_ablate(&config, study, out.as_deref()),
        Command::GradCheck {
            seed,
            tolerance,
            eps,
        } => run_grad_check(seed, tolerance, eps),
        Command::Report { file } => run_report(&file),
    }
}

fn generate_data(config: &Path, out: &Path, split: Split) -> Result<(), Error> {
    let config = load_config(config)?;
    let dataset = match split {
        Split::Train => config.train_dataset()?,
        Split::Eval => config.eval_dataset()?,
    };
    let image_dir = out.join("images");
    with_path(fs::create_dir_all(&image_dir).map_err(Error::Io), &image_dir)?;
    let mut names = Vec::with_capacity(dataset.len());
    for i in 0..dataset.len() {
        let scene = dataset.image(i)?;
        let name = format!("img{i:05}.tdim");
        write_tdim(&image_dir.join(&name), &scene.image)?;
        names.push(name);
    }
    let annotations = annotations_for(&dataset, &names)?;
    write_annotations(&out.join("annotations.json"), &annotations)?;
    outln!(
        "wrote {} images ({} objects) to {}",
        dataset.len(),
        annotations.annotations.len(),
        out.display()
    );
    Ok(())
}

fn run_train(config: &Path, out: &Path) -> Result<(), Error> {
    let config = load_config(config)?;
    with_path(fs::create_dir_all(out).map_err(Error::Io), out)?;
    let mut model = config.build_model()?;
    let dataset = config.train_dataset()?;
    let record = train(&mut model, &dataset, &config.training, Some(out))?;
    let checkpoint = out.join("model.ckpt");
    model.save(&checkpoint)?;
    fs::write(out.join("run.json"), serde_json::to_vec_pretty(&record)?)?;
    outln!(
        "trained {} steps ({} warm-up + {} full); final loss {:.4}",
        record.steps.len(),
        record.stage1_steps,
        record.stage2_steps,
        record.final_loss
    );
    outln!("checkpoint: {}", checkpoint.display());
    outln!("run record: {}", out.join("run.json").display());
    Ok(())
}

fn run_eval(config: &Path, checkpoint: &Path, json: bool) -> Result<(), Error> {
    let config = load_config(config)?;
    let model = with_path(
        DetectionModel::load(checkpoint, config.model.clone()),
        checkpoint,
    )?;
    let dataset = config.eval_dataset()?;
    let report = evaluate(&model, &dataset, &config.eval)?;
    if json {
        outln!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        outp!("{}", render_eval(&report));
    }
    Ok(())
}

fn render_eval(report: &EvalReport) -> String {
    let fmt = |v: Option<f64>| match v {
        Some(v) => format!("{v:.3}"),
        None => "-".to_string(),
    };
    let mut out = format!(
        "images: {}   objects: {}\n",
        report.ap.num_images, report.ap.num_gt
    );
    out.push_str(&format!(
        "AP: {}   AP50: {}   AP75: {}\n",
        fmt(report.ap.ap),
        fmt(report.ap.ap50),
        fmt(report.ap.ap75)
    ));
    let buckets: Vec<String> = report
        .ap
        .per_bucket
        .iter()
        .enumerate()
        .map(|(i, v)| format!("scale{i}: {}", fmt(*v)))
        .collect();
    out.push_str(&format!("AP by scale: {}\n", buckets.join("   ")));
    match &report.lrp {
        Some(lrp) => out.push_str(&format!(
            "oLRP: {:.3} (loc {:.3}, fp {:.3}, fn {:.3})\n",
            lrp.olrp, lrp.loc, lrp.fp, lrp.fn_rate
        )),
        None => out.push_str("oLRP: -\n"),
    }
    out.push_str(&format!(
        "counting accuracy: {}   mean queries: {:.1}\n",
        fmt(report.counting_accuracy),
        report.mean_queries
    ));
    out
}

fn run_ablate(config: &Path, study: Study, out: Option<&Path>) -> Result<(), Error> {
    let config = load_config(config)?;
    let table = match study {
        Study::Components => component_grid(&config)?,
        Study::CountingMode => counting_modes(&config)?,
        Study::CountLevels => {
            let cuts = config.model.count_cuts.clone();
            let budgets = config.model.query_budgets.clone();
            // One extra level: extend the cuts by 1.8× the last cut and
            // the budgets by the last gap.
            let mut more_cuts = cuts.clone();
            more_cuts.push(cuts.last().unwrap() * 1.8);
            let mut more_budgets = budgets.clone();
            let n = budgets.len();
            more_budgets.push(budgets[n - 1] + (budgets[n - 1] - budgets[n - 2]));
            count_level_variants(&config, &[(cuts, budgets), (more_cuts, more_budgets)])?
        }
        Study::BudgetSweep => fixed_budget_sweep(&config, &config.model.query_budgets)?,
    };
    outp!("{}", table.render());
    if let Some(path) = out {
        fs::write(path, serde_json::to_vec_pretty(&table)?)?;
        outln!("table written to {}", path.display());
    }
    Ok(())
}

/// Runs one check from up to three probe points. The model is continuous
/// but has kinks (max pooling, ReLU, box-overlap corners); a probe landing
/// within `eps` of one produces a spurious O(1) disagreement between the
/// one-sided analytic gradient and the straddling central difference. Such
/// collisions are point events, so a shifted probe resolves them — while a
/// genuinely wrong gradient fails from every probe point.
fn retrying(
    tolerance: f64,
    attempt: impl Fn(f64) -> Result<GradCheckReport, Error>,
) -> Result<GradCheckReport, Error> {
    const SHIFTS: [f64; 3] = [0.0, 0.35, 0.7];
    let mut last = None;
    for (i, shift) in SHIFTS.iter().enumerate() {
        let report = attempt(*shift)?;
        if report.max_rel_error <= tolerance {
            if i > 0 {
                log::info!(
                    "{}: probe straddled a kink, clean at retry {i}",
                    report.name
                );
            }
            return Ok(report);
        }
        last = Some(report);
    }
    Ok(last.expect("at least one attempt runs"))
}

/// Builds the battery of gradient checks and runs them.
fn run_grad_check(seed: u64, tolerance: f64, eps: f64) -> Result<(), Error> {
    let mut reports: Vec<GradCheckReport> = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Probe data: a deterministic wiggle, different per call.
    let probe = |shape: &[usize], phase: f64| {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|i| 0.4 * ((i as f64 * 0.37 + phase) * 1.3).sin())
            .collect();
        Tensor::from_vec(shape, data).unwrap()
    };

    // 1. Density extraction and count classification.
    let density = DensityHead::init(8, 8, 4, &mut rng)?;
    reports.push(retrying(tolerance, |shift| {
        let map = probe(&[8, 6, 6], 0.1 + shift);
        grad_check("counting", &[map], eps, |t| {
            let d = density.extract_density(&t[0])?;
            let logits = density.classify_level(&d)?;
            counting_loss(&logits, CountLevel(2))
        })
    })?);

    // 2. Density-guided gating of one level.
    let gates = FeatureGates::init(8, 2, &mut rng)?;
    reports.push(retrying(tolerance, |shift| {
        let feature = probe(&[8, 6, 6], 0.7 + shift);
        let guide = probe(&[8, 6, 6], 1.9 + shift);
        grad_check("gating", &[feature, guide], eps, |t| {
            gates.enhance_level(&t[0], &t[1])?.sum_all()
        })
    })?);

    // 3. The fully assembled loss, perturbing the input image. Every loss
    // term (detection, counting, selection) is live, but the two discrete
    // choices are pinned so the objective is smooth under perturbation:
    // the fixed budget covers every position (so top-k membership cannot
    // flip) and the query↔object assignment is frozen at the unperturbed
    // point (re-matching would make the loss only piecewise-smooth).
    let image_size = 16usize;
    let total_positions: usize = (0..3)
        .map(|i| {
            let cells = image_size / (4 << i);
            cells * cells
        })
        .sum();
    let model_config = ModelConfig {
        width: 8,
        heads: 2,
        encoder_layers: 1,
        decoder_layers: 2,
        density_hidden: 8,
        gate_reduction: 2,
        use_dynamic_queries: false,
        fixed_queries: total_positions,
        ..ModelConfig::default()
    };
    let model = DetectionModel::init(model_config, &mut rng)?;
    // Off-grid box edges: at a fresh model the refined anchors coincide
    // exactly with the grid priors, so grid-aligned ground truth would put
    // a GIoU min/max kink exactly at the probe point.
    let gt = GroundTruth::new(
        vec![[0.313, 0.357, 0.203, 0.241], [0.687, 0.613, 0.153, 0.107]],
        vec![0, 2],
    )?;
    let weights = MatchWeights::default();
    reports.push(retrying(tolerance, |shift| {
        let image = probe(&[3, 16, 16], 2.3 + shift).add_scalar(0.5)?;
        let base = model.forward(&image)?;
        let assignments = layer_assignments(&base.decoder, &gt, &weights)?;
        grad_check("full-model", &[image], eps, |t| {
            let output = model.forward(&t[0])?;
            let counting = model.counting_term(&output, 2)?;
            let bundle =
                matched_loss(&output.decoder, &gt, &assignments, counting.as_ref(), &weights)?;
            let selection =
                selection_loss(&output.queries.scores, &output.level_dims, &gt, &weights)?;
            bundle.loss.add(&selection)
        })
    })?);

    let mut failed = false;
    for report in &reports {
        let ok = report.max_rel_error <= tolerance;
        failed |= !ok;
        outln!(
            "{:<12} max rel error {:.3e} (eps {:.1e})  {}",
            report.name,
            report.max_rel_error,
            report.eps,
            if ok { "ok" } else { "FAIL" }
        );
    }
    if failed {
        return Err(Error::NonFinite {
            context: format!("gradient check exceeded tolerance {tolerance}"),
        });
    }
    Ok(())
}

fn run_report(file: &Path) -> Result<(), Error> {
    let bytes = with_path(fs::read(file).map_err(Error::Io), file)?;
    if let Ok(record) = serde_json::from_slice::<RunRecord>(&bytes) {
        let min = record
            .steps
            .iter()
            .map(|s| s.loss)
            .fold(f64::INFINITY, f64::min);
        outln!(
            "run record: {} steps ({} warm-up + {} full)",
            record.steps.len(),
            record.stage1_steps,
            record.stage2_steps
        );
        if let (Some(first), Some(last)) = (record.steps.first(), record.steps.last()) {
            outln!(
                "loss: first {:.4}   min {:.4}   final {:.4}",
                first.loss, min, last.loss
            );
        }
        let level_steps: Vec<_> = record
            .steps
            .iter()
            .filter_map(|s| Some((s.predicted_level?, s.target_level?)))
            .collect();
        if !level_steps.is_empty() {
            let hits = level_steps.iter().filter(|(p, t)| p == t).count();
            outln!(
                "count-level accuracy during training: {:.3} ({} of {} steps)",
                hits as f64 / level_steps.len() as f64,
                hits,
                level_steps.len()
            );
        }
        outln!("architecture: {}", &record.arch_hash[..12.min(record.arch_hash.len())]);
        return Ok(());
    }
    if let Ok(table) = serde_json::from_slice::<AblationTable>(&bytes) {
        outp!("{}", table.render());
        return Ok(());
    }
    match serde_json::from_slice::<EvalReport>(&bytes) {
        Ok(report) => {
            outp!("{}", render_eval(&report));
            Ok(())
        }
        Err(e) => Err(Error::Json(e)),
    }
}
