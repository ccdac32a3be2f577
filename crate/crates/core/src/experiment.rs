//! Multi-run experiments: parameter reports, classification rates with
//! confidence intervals, and training-curve CSVs.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::data::{self, DatasetSplit, SequenceSample, IMAGE_SIDE, STROKE_DIM};
use crate::model::{DatasetKind, Model, ModelConfig, ModelKind, SequenceModel};
use crate::nn::{collect_grads, Parameterized};
use crate::optim::{evaluate, CurvePoint, TrainConfig, Trainer};
use crate::tensor::{grad_check, GradCheck, Tape, Var};
use crate::{Error, Result};

/// Interval construction for the mean classification rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IntervalKind {
    /// Student-t with `n - 1` degrees of freedom.
    #[default]
    StudentT,
    /// Normal approximation.
    Normal,
}

/// Mean and half-width of the two-sided `level` interval (Student-t).
pub fn confidence_interval(rates: &[f64], level: f64) -> Result<(f64, f64)> {
    confidence_interval_with(rates, level, IntervalKind::StudentT)
}

pub fn confidence_interval_with(rates: &[f64], level: f64, kind: IntervalKind) -> Result<(f64, f64)> {
    if rates.len() < 2 {
        return Err(Error::Stats(format!("need at least 2 rates, got {}", rates.len())));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Stats(format!("confidence level must be in (0, 1), got {level}")));
    }
    let n = rates.len() as f64;
    let mean = rates.iter().sum::<f64>() / n;
    let var = rates.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let p = 1.0 - (1.0 - level) / 2.0;
    let quantile = match kind {
        IntervalKind::StudentT => {
            StudentsT::new(0.0, 1.0, n - 1.0).map_err(|e| Error::Stats(e.to_string()))?.inverse_cdf(p)
        }
        IntervalKind::Normal => Normal::new(0.0, 1.0).map_err(|e| Error::Stats(e.to_string()))?.inverse_cdf(p),
    };
    Ok((mean, quantile * var.sqrt() / n.sqrt()))
}

/// Aggregate of the successful runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: Option<f64>,
    pub ci_half_width: Option<f64>,
}

/// Mean and (when at least two rates exist) interval half-width.
pub fn aggregate(rates: &[f64], level: f64, kind: IntervalKind) -> Result<Aggregate> {
    if rates.is_empty() {
        return Ok(Aggregate { mean: None, ci_half_width: None });
    }
    if rates.len() == 1 {
        return Ok(Aggregate { mean: Some(rates[0]), ci_half_width: None });
    }
    let (mean, half) = confidence_interval_with(rates, level, kind)?;
    Ok(Aggregate { mean: Some(mean), ci_half_width: Some(half) })
}

/// Where the corpus comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DataSource {
    /// Directory with the four MNIST IDX files (raw or gzipped).
    Idx { dir: PathBuf },
    /// `<i>.txt` stroke files plus a labels file.
    Strokes { dir: PathBuf, labels: PathBuf },
    /// `<prefix>-<i>-inputdata.txt` / `-targetdata.txt` pairs.
    PublishedStrokes { dir: PathBuf, prefix: String, count: usize },
    /// Generated pen strokes.
    Synthetic { count: usize, seed: u64 },
}

impl DataSource {
    pub fn load(&self) -> Result<Vec<SequenceSample>> {
        Ok(match self {
            DataSource::Idx { dir } => data::load_spatial_dir(dir)?,
            DataSource::Strokes { dir, labels } => data::load_strokes(dir, labels)?,
            DataSource::PublishedStrokes { dir, prefix, count } => data::load_published_strokes(dir, prefix, *count)?,
            DataSource::Synthetic { count, seed } => data::synthetic_strokes(*count, *seed),
        })
    }

    fn dataset(&self) -> DatasetKind {
        match self {
            DataSource::Idx { .. } => DatasetKind::Spatial,
            _ => DatasetKind::Temporal,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: ModelKind,
    pub dataset: DatasetKind,
    pub runs: usize,
    pub train: TrainConfig,
    /// Training subset size; defaults to six sevenths of the corpus.
    pub train_size: Option<usize>,
    /// Test subset size; defaults to everything not used for training.
    pub test_size: Option<usize>,
    pub source: DataSource,
    pub confidence: f64,
    pub interval: IntervalKind,
    /// Report path; curves go next to it as `<stem>-run<r>.csv`.
    pub out: Option<PathBuf>,
    /// Also write each trained model as `<stem>-run<r>-model.json`.
    pub save_models: bool,
}

impl ExperimentConfig {
    pub fn new(model: ModelKind, dataset: DatasetKind, source: DataSource) -> Self {
        Self {
            model,
            dataset,
            runs: 10,
            train: TrainConfig::default(),
            train_size: None,
            test_size: None,
            source,
            confidence: 0.99,
            interval: IntervalKind::StudentT,
            out: None,
            save_models: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ModelConfig::preset(self.model, self.dataset)?;
        if self.runs == 0 {
            return Err(Error::Config("runs must be at least 1".into()));
        }
        if self.source.dataset() != self.dataset {
            return Err(Error::Config(format!("data source does not provide {} data", self.dataset)));
        }
        self.train.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run: usize,
    pub seed: u64,
    pub test_rate: Option<f64>,
    pub failed: bool,
    pub failure: Option<String>,
    pub curve: Vec<CurvePoint>,
}

/// A published result quoted for comparison, never measured here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiteratureRow {
    pub model: String,
    pub complexity: usize,
    pub rate: f64,
    pub ci_half_width: f64,
    pub source: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub model: ModelKind,
    pub dataset: DatasetKind,
    pub param_count: usize,
    pub source: String,
    pub rates: Vec<f64>,
    pub mean: Option<f64>,
    pub ci_half_width: Option<f64>,
    pub failed_runs: Vec<usize>,
    pub runs: Vec<RunRecord>,
    pub literature: Vec<LiteratureRow>,
    pub notes: Vec<String>,
    pub config: ExperimentConfig,
    pub wall_clock_seconds: f64,
}

const PUBLISHED: &[(DatasetKind, &str, usize, f64, f64)] = &[
    (DatasetKind::Spatial, "sm-rnn", 3_190, 0.965, 0.056),
    (DatasetKind::Spatial, "ff-nn", 328_810, 0.951, 0.0026),
    (DatasetKind::Spatial, "lstm", 3_360, 0.943, 0.011),
    (DatasetKind::Spatial, "s-nn", 3_470, 0.927, 0.016),
    (DatasetKind::Spatial, "rnn", 3_482, 0.766, 0.033),
    (DatasetKind::Temporal, "sm-rnn", 5_420, 0.9467, 0.0076),
    (DatasetKind::Temporal, "lstm", 5_490, 0.9496, 0.0027),
    (DatasetKind::Temporal, "rnn", 5_480, 0.7295, 0.1101),
];

/// Published reference rows for `dataset`, tagged `source: paper`.
pub fn literature_rows(dataset: DatasetKind) -> Vec<LiteratureRow> {
    PUBLISHED
        .iter()
        .filter(|row| row.0 == dataset)
        .map(|&(_, model, complexity, rate, half)| LiteratureRow {
            model: model.to_string(),
            complexity,
            rate,
            ci_half_width: half,
            source: "paper".to_string(),
        })
        .collect()
}

fn notes_for(cfg: &ExperimentConfig) -> Vec<String> {
    let mut notes = Vec::new();
    match cfg.dataset {
        DatasetKind::Spatial => {
            notes.push("pixels scaled by 1/255; each image is a sequence of 28 rows".into());
            match cfg.model {
                ModelKind::FfNn => notes.push("ff-nn topology is a parameter-matched stand-in (784-413-10)".into()),
                ModelKind::Rnn => {
                    notes.push("rnn topology is a parameter-matched stand-in (48-35-20, 20-30-10)".into())
                }
                ModelKind::Lstm => {
                    notes.push("lstm topology is a parameter-matched stand-in (28x17 cell, 17x10 head)".into())
                }
                ModelKind::SmRnn => {
                    notes.push("sm-rnn count includes the 10 final PReLU slopes of the classifier".into())
                }
            }
        }
        DatasetKind::Temporal => notes.push("stroke deltas are used unscaled".into()),
    }
    if let DataSource::Synthetic { .. } = cfg.source {
        notes.push("temporal corpus is synthetic pen strokes, not recorded handwriting".into());
    }
    notes
}

/// Runs `cfg.runs` independent train/evaluate cycles and, when `cfg.out`
/// is set, writes the JSON report and one curve CSV per run.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunReport> {
    cfg.validate()?;
    let corpus = cfg.source.load()?;
    run_on_corpus(cfg, &corpus)
}

/// [`run_experiment`] on an already loaded corpus.
pub fn run_on_corpus(cfg: &ExperimentConfig, corpus: &[SequenceSample]) -> Result<RunReport> {
    cfg.validate()?;
    let started = Instant::now();
    let test_default = corpus.len() / 7;
    let train_size = cfg.train_size.unwrap_or(corpus.len() - test_default.max(1));
    let param_count = Model::build(cfg.model, cfg.dataset, 0)?.param_count();

    let mut runs = Vec::with_capacity(cfg.runs);
    for r in 0..cfg.runs {
        let seed = cfg.train.seed.wrapping_add(r as u64);
        let split = DatasetSplit::new(corpus, seed, train_size, cfg.test_size)?;
        let mut model = Model::build(cfg.model, cfg.dataset, seed)?;
        let mut trainer = Trainer::new(&model, TrainConfig { seed, ..cfg.train.clone() })?;
        let mut failure = None;
        for epoch in 0..cfg.train.epochs {
            match trainer.train_epoch(&mut model, &split.train, epoch) {
                Ok(_) => {}
                Err(e @ Error::NonFiniteLoss { .. }) => {
                    eprintln!("warning: run {r} failed: {e}; excluded from the aggregate");
                    failure = Some(e.to_string());
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        trainer.flush();
        let test_rate = match failure {
            None => Some(evaluate(&model, &split.test)?),
            Some(_) => None,
        };
        if cfg.save_models && failure.is_none() {
            if let Some(out) = &cfg.out {
                model.save(sibling(out, &format!("-run{r}-model.json")))?;
            }
        }
        runs.push(RunRecord { run: r, seed, test_rate, failed: failure.is_some(), failure, curve: trainer.curve });
    }

    let rates: Vec<f64> = runs.iter().filter_map(|r| r.test_rate).collect();
    let agg = aggregate(&rates, cfg.confidence, cfg.interval)?;
    let report = RunReport {
        model: cfg.model,
        dataset: cfg.dataset,
        param_count,
        source: "measured".into(),
        rates,
        mean: agg.mean,
        ci_half_width: agg.ci_half_width,
        failed_runs: runs.iter().filter(|r| r.failed).map(|r| r.run).collect(),
        runs,
        literature: literature_rows(cfg.dataset),
        notes: notes_for(cfg),
        config: cfg.clone(),
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    if let Some(out) = &cfg.out {
        write_report(&report, out)?;
        emit_curves(&report, out)?;
    }
    Ok(report)
}

/// `<dir>/<stem><suffix>` for a report path `<dir>/<stem>.<ext>`.
pub fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "report".into());
    out.with_file_name(format!("{stem}{suffix}"))
}

/// Curve file for run `run` of a report written to `out`.
pub fn curve_path(out: &Path, run: usize) -> PathBuf {
    sibling(out, &format!("-run{run}.csv"))
}

pub fn write_report(report: &RunReport, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut text = serde_json::to_string_pretty(report)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Writes one curve CSV per run next to `out` and returns their paths.
pub fn emit_curves(report: &RunReport, out: &Path) -> Result<Vec<PathBuf>> {
    report
        .runs
        .iter()
        .map(|run| {
            let path = curve_path(out, run.run);
            write_curve(&run.curve, &path)?;
            Ok(path)
        })
        .collect()
}

/// CSV with header `iteration,loss,train_accuracy`.
pub fn write_curve(points: &[CurvePoint], path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(["iteration", "loss", "train_accuracy"])?;
    for p in points {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_curve(path: &Path) -> Result<Vec<CurvePoint>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// One summand of a parameter count, e.g. `input linear 43·20 + 20 = 880`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamTerm {
    pub label: String,
    pub count: usize,
}

/// A parenthesized group of terms, repeated `multiplicity` times.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamGroup {
    pub label: String,
    pub multiplicity: usize,
    pub terms: Vec<ParamTerm>,
}

impl ParamGroup {
    pub fn subtotal(&self) -> usize {
        self.terms.iter().map(|t| t.count).sum::<usize>() * self.multiplicity
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamReport {
    pub model: ModelKind,
    pub groups: Vec<ParamGroup>,
    pub total: usize,
}

impl ParamReport {
    /// The total as a single arithmetic line, e.g. `930·2 + (700 + 20 + 630)·2 + ... = 5,420`.
    pub fn expression(&self) -> String {
        let parts: Vec<String> = self
            .groups
            .iter()
            .map(|g| {
                let inner = g.terms.iter().map(|t| group_digits(t.count)).collect::<Vec<_>>().join(" + ");
                let inner = if g.terms.len() > 1 && (g.multiplicity > 1 || self.groups.len() > 1) {
                    format!("({inner})")
                } else {
                    inner
                };
                if g.multiplicity > 1 {
                    format!("{inner}·{}", g.multiplicity)
                } else {
                    inner
                }
            })
            .collect();
        format!("{} = {}", parts.join(" + "), group_digits(self.total))
    }
}

impl fmt::Display for ParamReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{}", self.model)?;
        for g in &self.groups {
            let times = if g.multiplicity > 1 { format!(" (x{})", g.multiplicity) } else { String::new() };
            writeln!(f, "  {}{times}: {}", g.label, group_digits(g.subtotal()))?;
            for t in &g.terms {
                writeln!(f, "    {:<40} {:>8}", t.label, group_digits(t.count))?;
            }
        }
        writeln!(f, "  total: {}", group_digits(self.total))?;
        write!(f, "  {}", self.expression())
    }
}

/// `5420` → `5,420`.
pub fn group_digits(n: usize) -> String {
    let s = n.to_string();
    let mut out = String::new();
    for (i, c) in s.chars().enumerate() {
        if i > 0 && (s.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(c);
    }
    out
}

fn linear_term(name: &str, n_in: usize, n_out: usize) -> ParamTerm {
    ParamTerm { label: format!("{name} {n_in}·{n_out} + {n_out}"), count: n_in * n_out + n_out }
}

fn prelu_term(name: &str, n: usize) -> ParamTerm {
    ParamTerm { label: format!("{name} PReLU {n}"), count: n }
}

fn group(label: &str, multiplicity: usize, terms: Vec<ParamTerm>) -> ParamGroup {
    ParamGroup { label: label.into(), multiplicity, terms }
}

/// Itemized parameter count of the preset model, computed from the
/// architecture description alone.
pub fn report_params(kind: ModelKind, dataset: DatasetKind) -> Result<ParamReport> {
    Ok(report_config_params(&ModelConfig::preset(kind, dataset)?))
}

pub fn report_config_params(config: &ModelConfig) -> ParamReport {
    let groups = match config {
        ModelConfig::SmRnn(c) => {
            let (m, s, h, k, n) = (c.marks, c.stimulus, c.hidden, c.class_hidden, c.classes);
            vec![
                group("mark projection (deposit, removal)", 2, vec![linear_term("linear", m, m)]),
                group(
                    "deposit / removal MLP",
                    2,
                    vec![
                        linear_term("input linear", s + m, h),
                        prelu_term("hidden", h),
                        linear_term("output linear", h, m),
                    ],
                ),
                group(
                    "classification MLP",
                    1,
                    vec![
                        linear_term("input linear", m, k),
                        prelu_term("hidden", k),
                        linear_term("output linear", k, n),
                        prelu_term("final", n),
                    ],
                ),
            ]
        }
        ModelConfig::FfNn(c) => vec![group(
            "feed-forward MLP",
            1,
            vec![
                linear_term("input linear", c.inputs, c.hidden),
                prelu_term("hidden", c.hidden),
                linear_term("output linear", c.hidden, c.classes),
                prelu_term("final", c.classes),
            ],
        )],
        ModelConfig::Rnn(c) => vec![
            group(
                "recurrent MLP",
                1,
                vec![
                    linear_term("input linear", c.stimulus + c.state, c.hidden),
                    prelu_term("hidden", c.hidden),
                    linear_term("output linear", c.hidden, c.state),
                    prelu_term("state", c.state),
                ],
            ),
            group(
                "classification MLP",
                1,
                vec![
                    linear_term("input linear", c.state, c.head_hidden),
                    prelu_term("hidden", c.head_hidden),
                    linear_term("output linear", c.head_hidden, c.classes),
                    prelu_term("final", c.classes),
                ],
            ),
        ],
        ModelConfig::Lstm(c) => {
            let mut i = c.inputs;
            let mut terms: Vec<ParamTerm> = c
                .layers
                .iter()
                .map(|&o| {
                    let t = ParamTerm {
                        label: format!("LSTM {i}x{o}: 4·{o}·({i} + {o} + 1)"),
                        count: 4 * o * (i + o + 1),
                    };
                    i = o;
                    t
                })
                .collect();
            terms.push(linear_term("output linear", i, c.classes));
            vec![group("LSTM stack", 1, terms)]
        }
    };
    let total = groups.iter().map(ParamGroup::subtotal).sum();
    ParamReport { model: config.kind(), groups, total }
}

/// A random input sequence of `steps` steps shaped like `dataset` samples.
pub fn probe_sequence(dataset: DatasetKind, steps: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..steps)
        .map(|t| match dataset {
            DatasetKind::Spatial => (0..IMAGE_SIDE).map(|_| rng.gen::<f64>()).collect(),
            DatasetKind::Temporal => {
                let mut step = vec![0.0; STROKE_DIM];
                // continuous deltas keep the probe off the activation kinks
                step[0] = rng.gen_range(-3.0..3.0);
                step[1] = rng.gen_range(-3.0..3.0);
                step[2] = f64::from(rng.gen_bool(0.1));
                step[3] = f64::from(t + 1 == steps);
                step
            }
        })
        .collect()
}

/// Softmax-NLL loss of `model` on one labelled sequence and its gradient
/// with respect to every parameter, in visiting order.
pub fn loss_and_grad(model: &mut Model, sequence: &[Vec<f64>], label: usize) -> Result<(f64, Vec<f64>)> {
    let mut tape = Tape::new();
    let steps = sequence
        .iter()
        .map(|s| tape.constant(vec![s.len()], s.clone()))
        .collect::<std::result::Result<Vec<Var>, _>>()?;
    let (logits, vars) = model.forward_tape(&mut tape, &steps)?;
    let loss = tape.softmax_nll(logits, &[label])?;
    tape.backward(loss)?;
    model.zero_grad();
    collect_grads(model, &tape, &vars)?;
    Ok((tape.value(loss)[0], model.flat_grads()))
}

/// Distance of the forward pass on `sequence` from the nearest activation
/// or clamp kink; see [`Tape::kink_margin`].
pub fn kink_margin(model: &Model, sequence: &[Vec<f64>]) -> Result<f64> {
    let mut tape = Tape::new();
    let steps = sequence
        .iter()
        .map(|s| tape.constant(vec![s.len()], s.clone()))
        .collect::<std::result::Result<Vec<Var>, _>>()?;
    model.forward_tape(&mut tape, &steps)?;
    Ok(tape.kink_margin())
}

/// Central-difference check of [`loss_and_grad`] over every parameter.
pub fn model_grad_check(model: &Model, sequence: &[Vec<f64>], label: usize) -> Result<GradCheck> {
    let mut probe = model.clone();
    grad_check(&model.flat_params(), |p: &[f64]| {
        probe.set_flat_params(p)?;
        loss_and_grad(&mut probe, sequence, label)
    })
}

/// Gradient check of a freshly initialized preset model on a random
/// sequence of `steps` steps.
pub fn preset_grad_check(kind: ModelKind, dataset: DatasetKind, steps: usize, seed: u64) -> Result<GradCheck> {
    let model = Model::build(kind, dataset, seed)?;
    let sequence = probe_sequence(dataset, steps, seed);
    model_grad_check(&model, &sequence, (seed % 10) as usize)
}
