use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use smrnn::experiment::{
    kink_margin, preset_grad_check, probe_sequence, report_params, run_experiment, DataSource, ExperimentConfig,
    IntervalKind,
};
use smrnn::optim::TrainConfig;
use smrnn::{DatasetKind, Model, ModelKind};

#[derive(Parser)]
#[command(name = "smrnn", version, about = "Train and inspect stigmergic-memory RNNs and baselines")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a multi-run train/evaluate experiment and write a JSON report.
    Train(TrainArgs),
    /// Print the itemized parameter count of a preset model.
    Params(PairArgs),
    /// Compare analytic gradients with central differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct PairArgs {
    #[arg(long, value_parser = parse_model)]
    model: ModelKind,
    #[arg(long, value_parser = parse_dataset)]
    dataset: DatasetKind,
}

#[derive(Clone, Copy, ValueEnum)]
enum Interval {
    T,
    Z,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    pair: PairArgs,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 128)]
    batch: usize,
    /// Use the whole training set for every update.
    #[arg(long)]
    full_batch: bool,
    #[arg(long, default_value_t = 10)]
    runs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    train_size: Option<usize>,
    #[arg(long)]
    test_size: Option<usize>,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Global gradient-norm threshold (off when absent).
    #[arg(long)]
    clip_norm: Option<f64>,
    /// Iterations per training-curve record.
    #[arg(long, default_value_t = 10)]
    eval_every: usize,
    /// Report path; curve CSVs are written next to it.
    #[arg(long, default_value = "report.json")]
    out: PathBuf,
    /// MNIST IDX directory (spatial) or stroke directory (temporal).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Labels file for a stroke directory.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Read published stroke files `<prefix>-<i>-inputdata.txt` instead.
    #[arg(long)]
    stroke_prefix: Option<String>,
    /// Number of stroke samples to read or generate.
    #[arg(long, default_value_t = 70_000)]
    stroke_count: usize,
    /// Generate synthetic pen strokes when no temporal data is given.
    #[arg(long)]
    synthetic: bool,
    #[arg(long, value_enum, default_value_t = Interval::T)]
    interval: Interval,
    #[arg(long, default_value_t = 0.99)]
    confidence: f64,
    /// Also save every trained model as JSON.
    #[arg(long)]
    save_models: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    pair: PairArgs,
    /// Sequence length (defaults: 28 spatial, 10 temporal).
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

fn parse_model(s: &str) -> std::result::Result<ModelKind, String> {
    s.parse().map_err(|e| format!("{e}"))
}

fn parse_dataset(s: &str) -> std::result::Result<DatasetKind, String> {
    s.parse().map_err(|e| format!("{e}"))
}

fn data_source(args: &TrainArgs) -> Result<DataSource> {
    let dataset = args.pair.dataset;
    Ok(match (dataset, &args.data) {
        (DatasetKind::Spatial, Some(dir)) => DataSource::Idx { dir: dir.clone() },
        (DatasetKind::Spatial, None) => DataSource::Idx { dir: PathBuf::from("data/mnist") },
        (DatasetKind::Temporal, Some(dir)) => match (&args.stroke_prefix, &args.labels) {
            (Some(prefix), _) => {
                DataSource::PublishedStrokes { dir: dir.clone(), prefix: prefix.clone(), count: args.stroke_count }
            }
            (None, Some(labels)) => DataSource::Strokes { dir: dir.clone(), labels: labels.clone() },
            (None, None) => bail!("a stroke directory needs --labels or --stroke-prefix"),
        },
        (DatasetKind::Temporal, None) if args.synthetic => {
            DataSource::Synthetic { count: args.stroke_count, seed: args.seed }
        }
        (DatasetKind::Temporal, None) => bail!("temporal data needs --data or --synthetic"),
    })
}

fn train(args: TrainArgs) -> Result<ExitCode> {
    let mut cfg = ExperimentConfig::new(args.pair.model, args.pair.dataset, data_source(&args)?);
    cfg.runs = args.runs;
    cfg.train = TrainConfig {
        epochs: args.epochs,
        batch_size: args.batch,
        full_batch: args.full_batch,
        clip_norm: args.clip_norm,
        seed: args.seed,
        eval_every: args.eval_every,
        lr: args.lr,
    };
    cfg.train_size = args.train_size;
    cfg.test_size = args.test_size;
    cfg.confidence = args.confidence;
    cfg.interval = match args.interval {
        Interval::T => IntervalKind::StudentT,
        Interval::Z => IntervalKind::Normal,
    };
    cfg.out = Some(args.out.clone());
    cfg.save_models = args.save_models;

    let report = run_experiment(&cfg).context("experiment failed")?;
    for run in &report.runs {
        match run.test_rate {
            Some(rate) => println!("run {} (seed {}): test rate {rate:.4}", run.run, run.seed),
            None => println!("run {} (seed {}): FAILED {}", run.run, run.seed, run.failure.as_deref().unwrap_or("")),
        }
    }
    match (report.mean, report.ci_half_width) {
        (Some(mean), Some(half)) => println!("{} {}: {mean:.4} ± {half:.4}", report.model, report.dataset),
        (Some(mean), None) => println!("{} {}: {mean:.4}", report.model, report.dataset),
        _ => println!("{} {}: no successful runs", report.model, report.dataset),
    }
    println!("parameters: {}", report.param_count);
    println!("report: {}", args.out.display());
    Ok(if report.rates.is_empty() { ExitCode::FAILURE } else { ExitCode::SUCCESS })
}

fn gradcheck(args: GradcheckArgs) -> Result<ExitCode> {
    let steps = args.steps.unwrap_or(match args.pair.dataset {
        DatasetKind::Spatial => 28,
        DatasetKind::Temporal => 10,
    });
    let check = preset_grad_check(args.pair.model, args.pair.dataset, steps, args.seed)?;
    let model = Model::build(args.pair.model, args.pair.dataset, args.seed)?;
    let margin = kink_margin(&model, &probe_sequence(args.pair.dataset, steps, args.seed))?;
    let i = check.worst_index;
    println!("parameters checked: {}", check.analytic.len());
    println!(
        "max relative error: {:.3e} (parameter {i}: analytic {:.6e}, numeric {:.6e})",
        check.max_rel_error, check.analytic[i], check.numeric[i]
    );
    println!("max absolute error: {:.3e}", check.max_abs_error());
    println!("distance to nearest kink: {margin:.3e}");
    println!(
        "max relative error where |a|+|n| >= 1e-6: {:.3e} ({} smaller coordinates)",
        check.max_rel_error_above(1e-6),
        check.count_below(1e-6)
    );
    if check.max_rel_error <= args.tolerance {
        println!("PASS (tolerance {:e})", args.tolerance);
        Ok(ExitCode::SUCCESS)
    } else {
        println!("FAIL (tolerance {:e})", args.tolerance);
        Ok(ExitCode::FAILURE)
    }
}

fn main() -> Result<ExitCode> {
    match Cli::parse().command {
        Command::Train(args) => train(args),
        Command::Params(pair) => {
            println!("{}", report_params(pair.model, pair.dataset)?);
            Ok(ExitCode::SUCCESS)
        }
        Command::Gradcheck(args) => gradcheck(args),
    }
}
