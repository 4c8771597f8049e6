//! Training pipelines and the experiment kinds behind `gradcal experiment`.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use gradcal::calibrate::{fit_temperature_on, predictions_at, TemperatureFit};
use gradcal::gaussbench::{
    correlation_experiment, expected_grad_logits, simplex_fixed_point_with, CorrelationConfig, FixedPointTarget,
    GaussianMixtureSpec, UncertaintyMetric,
};
use gradcal::losses::{focal_grad_factor, LossKind, LossSpec};
use gradcal::metrics::{calibration_report, pearson, BinReport, CalibrationReport};
use gradcal::numkit::{softmax, LabeledBatch, RngStream};
use gradcal::trainer::{EpochRecord, GradNormLog, TrainConfig, TrainHistory, TrainState, Trainer};
use serde::Serialize;

use crate::checkpoint;
use crate::config::{loss_spec, DataSource, RunConfig};
use crate::data::{load_dataset, Dataset};
use crate::error::{CliError, Result};
use crate::report::{Cell, CsvTable, Output, SeedStat};

/// Stream of the run seed that shuffles off the validation split.
const HOLDOUT_STREAM: u64 = 21;
/// Stream of the first seed that draws fixed-point posteriors.
const FIXED_POINT_STREAM: u64 = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    TrainEval,
    ToyCorrelation,
    GradFactor,
    GradVsBrier,
    EceOverEpochs,
    FixedPoint,
    WeightAblation,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 7] = [
        ExperimentKind::TrainEval,
        ExperimentKind::ToyCorrelation,
        ExperimentKind::GradFactor,
        ExperimentKind::GradVsBrier,
        ExperimentKind::EceOverEpochs,
        ExperimentKind::FixedPoint,
        ExperimentKind::WeightAblation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::TrainEval => "train-eval",
            ExperimentKind::ToyCorrelation => "toy-correlation",
            ExperimentKind::GradFactor => "grad-factor",
            ExperimentKind::GradVsBrier => "grad-vs-brier",
            ExperimentKind::EceOverEpochs => "ece-over-epochs",
            ExperimentKind::FixedPoint => "fixed-point",
            ExperimentKind::WeightAblation => "weight-ablation",
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExperimentKind {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        ExperimentKind::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
            let kinds: Vec<&str> = ExperimentKind::ALL.iter().map(|k| k.name()).collect();
            CliError::Usage(format!("unknown experiment kind {s:?}; valid kinds: {}", kinds.join(", ")))
        })
    }
}

/// Table label for a loss, e.g. `BSCE-GRA`.
pub fn display_name(kind: LossKind) -> &'static str {
    match kind {
        LossKind::Ce => "CE",
        LossKind::BrierLoss => "Brier",
        LossKind::Focal => "FL",
        LossKind::FocalGra => "FL-GRA",
        LossKind::FocalFlsd53 => "FLSD-53",
        LossKind::FocalFlsd53Gra => "FLSD-53-GRA",
        LossKind::DualFocal => "DFL",
        LossKind::DualFocalGra => "DFL-GRA",
        LossKind::Bsce => "BSCE",
        LossKind::BsceGra => "BSCE-GRA",
    }
}

/// Maps `f` over `items` on up to `available_parallelism` threads, keeping order.
pub fn par_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> Result<R> + Sync) -> Result<Vec<R>> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(items.len()).max(1);
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<R>>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().expect("no worker panics while holding the lock")[i] = Some(r);
            });
        }
    });
    slots.into_inner().expect("workers joined").into_iter().map(|r| r.expect("every slot filled")).collect()
}

/// Dataset for one seed with the validation rows split off the training set.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub train: LabeledBatch,
    pub val: LabeledBatch,
    pub test: LabeledBatch,
    pub mixture: Option<GaussianMixtureSpec>,
}

pub fn prepare(config: &RunConfig, seed: u64) -> Result<Prepared> {
    let Dataset { train, test, mixture } = load_dataset(&config.data_source(), seed)?;
    let holdout = config.train.validation_size;
    if holdout == 0 || holdout >= train.len() {
        return Err(CliError::Config(format!(
            "[train] validation_size {holdout} must be between 1 and {} (training rows − 1)",
            train.len().saturating_sub(1)
        )));
    }
    let (train, val) = train.split_holdout(holdout, &mut RngStream::new(seed).fork(HOLDOUT_STREAM))?;
    Ok(Prepared { train, val, test, mixture })
}

/// Test-set metrics before and after temperature scaling.
#[derive(Debug, Clone, Serialize)]
pub struct Evaluation {
    pub temperature: f64,
    pub val_ece_pre: f64,
    pub val_ece_post: f64,
    pub pre: CalibrationReport,
    pub post: CalibrationReport,
}

pub fn evaluate(config: &RunConfig, state: &TrainState, data: &Prepared) -> Result<Evaluation> {
    let bins = config.eval.num_bins;
    let val_logits = state.model.logits_batch(data.val.features())?;
    let TemperatureFit { temperature, val_ece_pre, val_ece_post, .. } =
        fit_temperature_on(&val_logits, data.val.labels(), bins, config.eval.grid())?;
    let test_logits = state.model.logits_batch(data.test.features())?;
    let pre = calibration_report(&predictions_at(&test_logits, data.test.labels(), 1.0)?, bins)?;
    let post = calibration_report(&predictions_at(&test_logits, data.test.labels(), temperature)?, bins)?;
    Ok(Evaluation { temperature, val_ece_pre, val_ece_post, pre, post })
}

/// Test-set metrics at `T = 1` only.
pub fn evaluate_uncalibrated(config: &RunConfig, state: &TrainState, data: &Prepared) -> Result<CalibrationReport> {
    let logits = state.model.logits_batch(data.test.features())?;
    Ok(calibration_report(&predictions_at(&logits, data.test.labels(), 1.0)?, config.eval.num_bins)?)
}

#[derive(Debug, Clone, Serialize)]
pub struct SeedRun {
    pub seed: u64,
    pub loss: LossSpec,
    pub train_config: TrainConfig,
    pub resumed_from_epoch: usize,
    pub evaluation: Evaluation,
    pub epochs: Vec<EpochRecord>,
    #[serde(skip)]
    pub grad_norms: Vec<GradNormLog>,
    pub clamped_log_probs: u64,
    pub wall_time_secs: f64,
    #[serde(skip)]
    pub state: TrainState,
}

/// Options for a single training run.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub resume: Option<TrainState>,
    /// Where to write the checkpoint; none means no checkpoint.
    pub checkpoint: Option<PathBuf>,
}

pub fn train_seed(config: &RunConfig, loss: LossSpec, seed: u64, opts: RunOptions) -> Result<SeedRun> {
    let start = Instant::now();
    let data = prepare(config, seed)?;
    let train_config = config.train_config(loss, seed)?;
    let trainer = Trainer::new(&train_config, &data.train, &data.test)?;
    let mut state = match opts.resume {
        Some(state) => {
            check_shape(&state, &data.train, &train_config)?;
            state
        }
        None => trainer.init()?,
    };
    let resumed_from_epoch = state.epochs_done;
    let mut history = TrainHistory::default();
    let chunk = match config.train.checkpoint_every {
        0 => train_config.epochs,
        n => n,
    };
    while state.epochs_done < train_config.epochs {
        trainer.run(&mut state, &mut history, chunk)?;
        if let Some(path) = &opts.checkpoint {
            checkpoint::save(&state, path)?;
        }
    }
    if let Some(path) = &opts.checkpoint {
        checkpoint::save(&state, path)?;
    }
    let evaluation = evaluate(config, &state, &data)?;
    Ok(SeedRun {
        seed,
        loss,
        train_config,
        resumed_from_epoch,
        evaluation,
        epochs: history.epochs,
        grad_norms: history.grad_norms,
        clamped_log_probs: history.clamped_log_probs,
        wall_time_secs: start.elapsed().as_secs_f64(),
        state,
    })
}

pub fn check_shape(state: &TrainState, data: &LabeledBatch, config: &TrainConfig) -> Result<()> {
    let m = &state.model;
    if m.input_dim() != data.input_dim() || m.num_classes() != data.num_classes() || m.hidden_dims() != config.hidden {
        return Err(CliError::Data(format!(
            "checkpoint model is {}→{:?}→{} but the run needs {}→{:?}→{}",
            m.input_dim(),
            m.hidden_dims(),
            m.num_classes(),
            data.input_dim(),
            config.hidden,
            data.num_classes()
        )));
    }
    Ok(())
}

pub fn checkpoint_path(out: &Path, seed: u64) -> PathBuf {
    out.join("checkpoints").join(format!("seed-{seed}.ckpt"))
}

/// Header prefix shared by the per-run metric tables.
const METRIC_COLUMNS: [&str; 12] = [
    "seed",
    "loss",
    "temperature",
    "accuracy",
    "ece_pre_pct",
    "ece_post_pct",
    "ada_ece_pre_pct",
    "ada_ece_post_pct",
    "classwise_ece_pre_pct",
    "classwise_ece_post_pct",
    "nll_pre",
    "nll_post",
];

fn metric_row(seed: Cell, loss: &str, e: &MetricValues) -> Vec<Cell> {
    vec![
        seed,
        loss.into(),
        e.temperature.into(),
        e.accuracy.into(),
        (100.0 * e.ece_pre).into(),
        (100.0 * e.ece_post).into(),
        (100.0 * e.ada_ece_pre).into(),
        (100.0 * e.ada_ece_post).into(),
        (100.0 * e.classwise_ece_pre).into(),
        (100.0 * e.classwise_ece_post).into(),
        e.nll_pre.into(),
        e.nll_post.into(),
    ]
}

#[derive(Debug, Clone, Copy, Default)]
struct MetricValues {
    temperature: f64,
    accuracy: f64,
    ece_pre: f64,
    ece_post: f64,
    ada_ece_pre: f64,
    ada_ece_post: f64,
    classwise_ece_pre: f64,
    classwise_ece_post: f64,
    nll_pre: f64,
    nll_post: f64,
}

impl MetricValues {
    fn of(e: &Evaluation) -> Self {
        MetricValues {
            temperature: e.temperature,
            accuracy: e.pre.accuracy,
            ece_pre: e.pre.ece,
            ece_post: e.post.ece,
            ada_ece_pre: e.pre.ada_ece,
            ada_ece_post: e.post.ada_ece,
            classwise_ece_pre: e.pre.classwise_ece,
            classwise_ece_post: e.post.classwise_ece,
            nll_pre: e.pre.nll,
            nll_post: e.post.nll,
        }
    }

    fn mean(all: &[MetricValues]) -> Self {
        let n = all.len() as f64;
        let avg = |f: fn(&MetricValues) -> f64| all.iter().map(f).sum::<f64>() / n;
        MetricValues {
            temperature: avg(|m| m.temperature),
            accuracy: avg(|m| m.accuracy),
            ece_pre: avg(|m| m.ece_pre),
            ece_post: avg(|m| m.ece_post),
            ada_ece_pre: avg(|m| m.ada_ece_pre),
            ada_ece_post: avg(|m| m.ada_ece_post),
            classwise_ece_pre: avg(|m| m.classwise_ece_pre),
            classwise_ece_post: avg(|m| m.classwise_ece_post),
            nll_pre: avg(|m| m.nll_pre),
            nll_post: avg(|m| m.nll_post),
        }
    }
}

/// Per-seed values and their mean for every headline metric.
#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub temperature: SeedStat,
    pub accuracy: SeedStat,
    pub ece_pre: SeedStat,
    pub ece_post: SeedStat,
    pub ada_ece_pre: SeedStat,
    pub ada_ece_post: SeedStat,
    pub classwise_ece_pre: SeedStat,
    pub classwise_ece_post: SeedStat,
}

impl Summary {
    pub fn of(evals: &[&Evaluation]) -> Self {
        let stat = |f: fn(&Evaluation) -> f64| SeedStat::new(evals.iter().map(|e| f(e)).collect());
        Summary {
            temperature: stat(|e| e.temperature),
            accuracy: stat(|e| e.pre.accuracy),
            ece_pre: stat(|e| e.pre.ece),
            ece_post: stat(|e| e.post.ece),
            ada_ece_pre: stat(|e| e.pre.ada_ece),
            ada_ece_post: stat(|e| e.post.ada_ece),
            classwise_ece_pre: stat(|e| e.pre.classwise_ece),
            classwise_ece_post: stat(|e| e.post.classwise_ece),
        }
    }
}

fn metrics_table(name: &str, runs: &[(u64, LossKind, &Evaluation)]) -> CsvTable {
    let mut table = CsvTable::new(name, &METRIC_COLUMNS);
    let mut losses: Vec<LossKind> = Vec::new();
    for &(_, k, _) in runs {
        if !losses.contains(&k) {
            losses.push(k);
        }
    }
    for loss in losses {
        let values: Vec<MetricValues> = runs
            .iter()
            .filter(|r| r.1 == loss)
            .map(|&(seed, _, e)| {
                let v = MetricValues::of(e);
                table.push(metric_row(seed.to_string().into(), display_name(loss), &v));
                v
            })
            .collect();
        table.push(metric_row("mean".into(), display_name(loss), &MetricValues::mean(&values)));
    }
    table
}

fn bins_table(name: &str, runs: &[(u64, LossKind, &BinReport)]) -> CsvTable {
    let mut table = CsvTable::new(name, &["seed", "loss", "lower", "upper", "count", "avg_confidence", "accuracy"]);
    for &(seed, loss, report) in runs {
        for b in &report.bins {
            table.push(vec![
                seed.into(),
                display_name(loss).into(),
                b.lower.into(),
                b.upper.into(),
                b.count.into(),
                b.avg_confidence.into(),
                b.accuracy.into(),
            ]);
        }
    }
    table
}

fn epochs_table(name: &str, runs: &[&SeedRun]) -> CsvTable {
    let mut table =
        CsvTable::new(name, &["seed", "loss", "epoch", "lr", "train_loss", "test_accuracy", "test_ece_pct"]);
    for run in runs {
        for r in &run.epochs {
            table.push(vec![
                run.seed.into(),
                display_name(run.loss.kind).into(),
                r.epoch.into(),
                r.lr.into(),
                r.train_loss.into(),
                r.test_accuracy.into(),
                (100.0 * r.test_ece).into(),
            ]);
        }
    }
    table
}

fn grad_norm_table(name: &str, runs: &[&SeedRun]) -> CsvTable {
    let mut table =
        CsvTable::new(name, &["seed", "loss", "epoch", "sample_id", "brier_score", "grad_norm", "weight"]);
    for run in runs {
        for log in &run.grad_norms {
            for r in &log.records {
                table.push(vec![
                    run.seed.into(),
                    display_name(run.loss.kind).into(),
                    log.epoch.into(),
                    r.sample_id.into(),
                    r.brier_score.into(),
                    r.last_layer_grad_norm.into(),
                    r.weight.into(),
                ]);
            }
        }
    }
    table
}

/// Everything an experiment needs from the command line.
#[derive(Debug, Clone)]
pub struct Context<'a> {
    pub config: &'a RunConfig,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub resume: Option<PathBuf>,
}

#[derive(Serialize)]
struct Envelope<'a, T: Serialize> {
    kind: &'a str,
    config: &'a RunConfig,
    seeds: &'a [u64],
    wall_time_secs: f64,
    #[serde(flatten)]
    body: T,
}

fn envelope<T: Serialize>(name: &str, ctx: &Context, start: Instant, seeds: &[u64], body: T) -> Result<Output> {
    Output::new(
        name,
        Envelope { kind: name, config: ctx.config, seeds, wall_time_secs: start.elapsed().as_secs_f64(), body },
    )
}

#[derive(Serialize)]
struct TrainBody<'a> {
    runs: &'a [SeedRun],
    summary: Summary,
    checkpoints: Vec<PathBuf>,
}

/// `train` and `experiment train-eval`: the configured loss over every seed.
pub fn train_eval(ctx: &Context, name: &str) -> Result<Output> {
    let start = Instant::now();
    let loss = ctx.config.loss_spec()?;
    let resume = match &ctx.resume {
        Some(path) if ctx.seeds.len() != 1 => {
            return Err(CliError::Usage(format!("--resume {} needs exactly one seed", path.display())))
        }
        Some(path) => Some(checkpoint::load(path)?),
        None => None,
    };
    let runs = par_map(&ctx.seeds, |&seed| {
        let opts = RunOptions { resume: resume.clone(), checkpoint: Some(checkpoint_path(&ctx.out, seed)) };
        train_seed(ctx.config, loss, seed, opts)
    })?;
    let evals: Vec<&Evaluation> = runs.iter().map(|r| &r.evaluation).collect();
    let refs: Vec<&SeedRun> = runs.iter().collect();
    let mut tables = vec![
        metrics_table(&format!("{name}_metrics"), &runs.iter().map(|r| (r.seed, loss.kind, &r.evaluation)).collect::<Vec<_>>()),
        bins_table(&format!("{name}_bins_pre"), &runs.iter().map(|r| (r.seed, loss.kind, &r.evaluation.pre.bin_data)).collect::<Vec<_>>()),
        bins_table(&format!("{name}_bins_post"), &runs.iter().map(|r| (r.seed, loss.kind, &r.evaluation.post.bin_data)).collect::<Vec<_>>()),
        epochs_table(&format!("{name}_epochs"), &refs),
    ];
    if runs.iter().any(|r| !r.grad_norms.is_empty()) {
        tables.push(grad_norm_table(&format!("{name}_grad_norms"), &refs));
    }
    let body = TrainBody {
        runs: &runs,
        summary: Summary::of(&evals),
        checkpoints: ctx.seeds.iter().map(|&s| checkpoint_path(&ctx.out, s)).collect(),
    };
    let mut out = envelope(name, ctx, start, &ctx.seeds, body)?;
    out.tables = tables;
    Ok(out)
}

fn load_for(ctx: &Context, seed: u64) -> Result<(TrainState, Prepared)> {
    let path = ctx.resume.clone().unwrap_or_else(|| checkpoint_path(&ctx.out, seed));
    let state = checkpoint::load(&path)?;
    let data = prepare(ctx.config, seed)?;
    check_shape(&state, &data.train, &ctx.config.train_config(ctx.config.loss_spec()?, seed)?)?;
    Ok((state, data))
}

#[derive(Serialize)]
struct EvalRun {
    seed: u64,
    epochs_done: usize,
    metrics: CalibrationReport,
}

/// `eval`: test metrics of saved checkpoints at `T = 1`.
pub fn eval(ctx: &Context) -> Result<Output> {
    let start = Instant::now();
    let runs = par_map(&ctx.seeds, |&seed| {
        let (state, data) = load_for(ctx, seed)?;
        Ok(EvalRun { seed, epochs_done: state.epochs_done, metrics: evaluate_uncalibrated(ctx.config, &state, &data)? })
    })?;
    let mut table = CsvTable::new("eval_metrics", &["seed", "accuracy", "ece_pct", "ada_ece_pct", "classwise_ece_pct", "nll", "mean_brier"]);
    for r in &runs {
        let m = &r.metrics;
        table.push(vec![
            r.seed.to_string().into(),
            m.accuracy.into(),
            (100.0 * m.ece).into(),
            (100.0 * m.ada_ece).into(),
            (100.0 * m.classwise_ece).into(),
            m.nll.into(),
            m.mean_brier.into(),
        ]);
    }
    let n = runs.len() as f64;
    let mean = |f: fn(&CalibrationReport) -> f64| runs.iter().map(|r| f(&r.metrics)).sum::<f64>() / n;
    table.push(vec![
        "mean".into(),
        mean(|m| m.accuracy).into(),
        (100.0 * mean(|m| m.ece)).into(),
        (100.0 * mean(|m| m.ada_ece)).into(),
        (100.0 * mean(|m| m.classwise_ece)).into(),
        mean(|m| m.nll).into(),
        mean(|m| m.mean_brier).into(),
    ]);
    let kind = ctx.config.loss.kind;
    let bins = bins_table("eval_bins", &runs.iter().map(|r| (r.seed, kind, &r.metrics.bin_data)).collect::<Vec<_>>());
    let ece = SeedStat::new(runs.iter().map(|r| r.metrics.ece).collect());
    let accuracy = SeedStat::new(runs.iter().map(|r| r.metrics.accuracy).collect());
    #[derive(Serialize)]
    struct Body<'a> {
        runs: &'a [EvalRun],
        ece: SeedStat,
        accuracy: SeedStat,
    }
    let mut out = envelope("eval", ctx, start, &ctx.seeds, Body { runs: &runs, ece, accuracy })?;
    out.tables = vec![table, bins];
    Ok(out)
}

#[derive(Serialize)]
struct CalibrateRun {
    seed: u64,
    epochs_done: usize,
    #[serde(flatten)]
    evaluation: Evaluation,
}

/// `calibrate`: fit `T` on the validation split of saved checkpoints.
pub fn calibrate(ctx: &Context) -> Result<Output> {
    let start = Instant::now();
    let runs = par_map(&ctx.seeds, |&seed| {
        let (state, data) = load_for(ctx, seed)?;
        Ok(CalibrateRun { seed, epochs_done: state.epochs_done, evaluation: evaluate(ctx.config, &state, &data)? })
    })?;
    let kind = ctx.config.loss.kind;
    let evals: Vec<&Evaluation> = runs.iter().map(|r| &r.evaluation).collect();
    let tables = vec![
        metrics_table("calibrate_metrics", &runs.iter().map(|r| (r.seed, kind, &r.evaluation)).collect::<Vec<_>>()),
        bins_table("calibrate_bins_post", &runs.iter().map(|r| (r.seed, kind, &r.evaluation.post.bin_data)).collect::<Vec<_>>()),
    ];
    #[derive(Serialize)]
    struct Body<'a> {
        runs: &'a [CalibrateRun],
        summary: Summary,
    }
    let mut out = envelope("calibrate", ctx, start, &ctx.seeds, Body { runs: &runs, summary: Summary::of(&evals) })?;
    out.tables = tables;
    Ok(out)
}

pub fn run_experiment(kind: ExperimentKind, ctx: &Context) -> Result<Output> {
    match kind {
        ExperimentKind::TrainEval => train_eval(ctx, kind.name()),
        ExperimentKind::ToyCorrelation => toy_correlation(ctx),
        ExperimentKind::GradFactor => grad_factor(ctx),
        ExperimentKind::GradVsBrier => grad_vs_brier(ctx),
        ExperimentKind::EceOverEpochs => ece_over_epochs(ctx),
        ExperimentKind::FixedPoint => fixed_point(ctx),
        ExperimentKind::WeightAblation => weight_ablation(ctx),
    }
}

fn synthetic_only(ctx: &Context, kind: ExperimentKind) -> Result<crate::config::SyntheticData> {
    match ctx.config.data_source() {
        DataSource::Synthetic(s) => Ok(s),
        _ => Err(CliError::Config(format!("{kind} needs the synthetic dataset (it uses the true posterior)"))),
    }
}

fn metric_params(m: &UncertaintyMetric) -> (f64, f64) {
    match *m {
        UncertaintyMetric::Focal { gamma } | UncertaintyMetric::DualFocal { gamma } => (gamma, f64::NAN),
        UncertaintyMetric::Gbs { gamma, beta } => (gamma, beta),
        UncertaintyMetric::TrueError => (f64::NAN, f64::NAN),
    }
}

fn toy_correlation(ctx: &Context) -> Result<Output> {
    let start = Instant::now();
    let synthetic = synthetic_only(ctx, ExperimentKind::ToyCorrelation)?;
    if synthetic.means.is_some() || synthetic.data_seed.is_some() {
        return Err(CliError::Config("toy-correlation draws a fresh mixture per seed; drop means and data_seed".into()));
    }
    let x = &ctx.config.experiment;
    let cfg = CorrelationConfig {
        seeds: x.correlation_seeds.clone(),
        num_classes: synthetic.num_classes,
        train_per_class: synthetic.train_per_class,
        test_per_class: synthetic.test_per_class,
        epochs: ctx.config.train.epochs,
        loss: ctx.config.loss_spec()?,
        reading: x.correlation_reading,
        label: x.correlation_label,
    };
    let report = correlation_experiment(&cfg)?;

    let seed_cols: Vec<String> = cfg.seeds.iter().map(|s| format!("seed_{s}")).collect();
    let mut header = vec!["metric", "gamma", "beta", "mean_pearson"];
    header.extend(seed_cols.iter().map(String::as_str));
    let mut candidates = CsvTable::new("toy_correlation_candidates", &header);
    for c in &report.candidates {
        let (g, b) = metric_params(&c.metric);
        let mut row: Vec<Cell> = vec![c.metric.name().into(), g.into(), b.into(), c.mean.into()];
        row.extend(c.per_run.iter().map(|&v| Cell::from(v)));
        candidates.push(row);
    }
    let mut best = CsvTable::new("toy_correlation", &header);
    for r in &report.results {
        let (g, b) = metric_params(&r.best);
        let mut row: Vec<Cell> = vec![r.name.into(), g.into(), b.into(), r.pearson.into()];
        row.extend(r.per_run.iter().map(|&v| Cell::from(v)));
        best.push(row);
    }
    #[derive(Serialize)]
    struct Body<'a> {
        correlation: &'a gradcal::gaussbench::CorrelationReport,
    }
    let mut out = envelope("toy-correlation", ctx, start, &cfg.seeds, Body { correlation: &report })?;
    out.tables = vec![best, candidates];
    Ok(out)
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct FactorPeak {
    pub gamma: f64,
    pub p: f64,
    pub g: f64,
}

fn grad_factor(ctx: &Context) -> Result<Output> {
    let start = Instant::now();
    let x = &ctx.config.experiment;
    let n = x.grad_factor_points;
    let mut curve = CsvTable::new("grad_factor", &["p", "gamma", "g"]);
    let mut peaks = Vec::new();
    for &gamma in &x.grad_factor_gammas {
        let mut peak = FactorPeak { gamma, p: f64::NAN, g: f64::NEG_INFINITY };
        for i in 1..=n {
            let p = i as f64 / n as f64;
            let g = focal_grad_factor(p, gamma)?;
            if g > peak.g {
                peak = FactorPeak { gamma, p, g };
            }
            curve.push(vec![p.into(), gamma.into(), g.into()]);
        }
        peaks.push(peak);
    }
    let mut peak_table = CsvTable::new("grad_factor_peaks", &["gamma", "p", "g"]);
    for pk in &peaks {
        peak_table.push(vec![pk.gamma.into(), pk.p.into(), pk.g.into()]);
    }
    #[derive(Serialize)]
    struct Body {
        points: usize,
        peaks: Vec<FactorPeak>,
    }
    let mut out = envelope("grad-factor", ctx, start, &[], Body { points: n, peaks })?;
    out.tables = vec![curve, peak_table];
    Ok(out)
}

fn loss_jobs(kinds: &[LossKind], seeds: &[u64]) -> Vec<(LossKind, u64)> {
    kinds.iter().flat_map(|&k| seeds.iter().map(move |&s| (k, s))).collect()
}

/// Hyperparameters for a compared loss: the `[loss]` values when the kind
/// matches, customary defaults otherwise.
fn compared_spec(config: &RunConfig, kind: LossKind) -> Result<LossSpec> {
    if kind == config.loss.kind {
        config.loss_spec()
    } else {
        loss_spec(kind, None, None)
    }
}

#[derive(Debug, Clone, Serialize)]
struct CorrelationRow {
    loss: LossKind,
    seed: u64,
    epoch: usize,
    pearson_grad_norm_brier: f64,
}

fn grad_vs_brier(ctx: &Context) -> Result<Output> {
    let start = Instant::now();
    let mut config = ctx.config.clone();
    let last = config.train.epochs - 1;
    if !config.train.log_grad_norms_at.contains(&last) {
        config.train.log_grad_norms_at.push(last);
    }
    let jobs = loss_jobs(&config.experiment.curve_losses, &ctx.seeds);
    let runs = par_map(&jobs, |&(kind, seed)| train_seed(&config, compared_spec(&config, kind)?, seed, RunOptions::default()))?;
    let refs: Vec<&SeedRun> = runs.iter().collect();
    let mut summary = CsvTable::new("grad_vs_brier_summary", &["seed", "loss", "epoch", "pearson"]);
    let mut rows = Vec::new();
    for run in &runs {
        for log in &run.grad_norms {
            let norms: Vec<f64> = log.records.iter().map(|r| r.last_layer_grad_norm).collect();
            let briers: Vec<f64> = log.records.iter().map(|r| r.brier_score).collect();
            let r = pearson(&norms, &briers).unwrap_or(f64::NAN);
            summary.push(vec![run.seed.into(), display_name(run.loss.kind).into(), log.epoch.into(), r.into()]);
            rows.push(CorrelationRow { loss: run.loss.kind, seed: run.seed, epoch: log.epoch, pearson_grad_norm_brier: r });
        }
    }
    #[derive(Serialize)]
    struct Body<'a> {
        runs: &'a [SeedRun],
        correlations: Vec<CorrelationRow>,
    }
    let mut out = envelope("grad-vs-brier", ctx, start, &ctx.seeds, Body { runs: &runs, correlations: rows })?;
    out.tables = vec![grad_norm_table("grad_vs_brier", &refs), summary];
    Ok(out)
}

fn ece_over_epochs(ctx: &Context) -> Result<Output> {
    let start = Instant::now();
    let config = ctx.config;
    let kinds = &config.experiment.curve_losses;
    let jobs = loss_jobs(kinds, &ctx.seeds);
    let runs = par_map(&jobs, |&(kind, seed)| train_seed(config, compared_spec(config, kind)?, seed, RunOptions::default()))?;
    let refs: Vec<&SeedRun> = runs.iter().collect();
    let mut mean = CsvTable::new("ece_over_epochs_mean", &["loss", "epoch", "test_ece_pct", "test_accuracy"]);
    for &kind in kinds {
        let of_kind: Vec<&SeedRun> = runs.iter().filter(|r| r.loss.kind == kind).collect();
        for epoch in 0..config.train.epochs {
            let recs: Vec<&EpochRecord> = of_kind.iter().filter_map(|r| r.epochs.get(epoch)).collect();
            let n = recs.len() as f64;
            mean.push(vec![
                display_name(kind).into(),
                epoch.into(),
                (100.0 * recs.iter().map(|r| r.test_ece).sum::<f64>() / n).into(),
                (recs.iter().map(|r| r.test_accuracy).sum::<f64>() / n).into(),
            ]);
        }
    }
    #[derive(Serialize)]
    struct Body<'a> {
        runs: &'a [SeedRun],
    }
    let mut out = envelope("ece-over-epochs", ctx, start, &ctx.seeds, Body { runs: &runs })?;
    out.tables = vec![epochs_table("ece_over_epochs", &refs), mean];
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct FixedPointCase {
    pub case: usize,
    pub loss: LossKind,
    pub target: FixedPointTarget,
    pub eta: Vec<f64>,
    pub q: Vec<f64>,
    pub linf_distance: f64,
    pub iterations: usize,
    pub grad_norm: f64,
    pub grad_norm_at_eta: f64,
}

fn fixed_point(ctx: &Context) -> Result<Output> {
    let start = Instant::now();
    let x = &ctx.config.experiment;
    let seed = ctx.seeds[0];
    let gra = match ctx.config.loss.kind {
        LossKind::BsceGra => ctx.config.loss_spec()?,
        _ => LossSpec::with_defaults(LossKind::BsceGra),
    };
    let mut rng = RngStream::new(seed).fork(FIXED_POINT_STREAM);
    let mut cases = Vec::new();
    let span = x.fixed_point_max_classes - 1;
    for case in 0..x.fixed_point_cases {
        let k = 2 + case % span;
        let eta = softmax(&rng.standard_normal(k)?, 1.0)?;
        for (loss, target) in
            [(gra, FixedPointTarget::Posterior), (gra, FixedPointTarget::Label), (LossSpec::ce(), FixedPointTarget::Posterior)]
        {
            // full Newton steps overshoot on the per-label objective
            let (damping, steps) = match target {
                FixedPointTarget::Posterior => (1.0, 200),
                FixedPointTarget::Label => (0.5, 1000),
            };
            let trace = simplex_fixed_point_with(&eta, &loss, damping, steps, target)?;
            let (g, _) = expected_grad_logits(&eta, &eta, &loss, target)?;
            let linf = trace.q.iter().zip(eta.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            cases.push(FixedPointCase {
                case,
                loss: loss.kind,
                target,
                eta: eta.as_slice().to_vec(),
                q: trace.q.as_slice().to_vec(),
                linf_distance: linf,
                iterations: trace.iterations,
                grad_norm: trace.grad_norm,
                grad_norm_at_eta: g.iter().map(|v| v * v).sum::<f64>().sqrt(),
            });
        }
    }
    let mut table = CsvTable::new(
        "fixed_point",
        &["case", "k", "loss", "target", "linf_distance", "iterations", "grad_norm", "grad_norm_at_eta"],
    );
    for c in &cases {
        let target = match c.target {
            FixedPointTarget::Posterior => "posterior",
            FixedPointTarget::Label => "label",
        };
        table.push(vec![
            c.case.into(),
            c.eta.len().into(),
            display_name(c.loss).into(),
            target.into(),
            c.linf_distance.into(),
            c.iterations.into(),
            c.grad_norm.into(),
            c.grad_norm_at_eta.into(),
        ]);
    }
    #[derive(Serialize)]
    struct Body<'a> {
        loss: LossSpec,
        cases: &'a [FixedPointCase],
    }
    let mut out = envelope("fixed-point", ctx, start, &[seed], Body { loss: gra, cases: &cases })?;
    out.tables = vec![table];
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub loss: String,
    pub ece_pre: SeedStat,
    pub ece_post: SeedStat,
    pub ada_ece_pre: SeedStat,
    pub ada_ece_post: SeedStat,
    pub temperature: SeedStat,
    pub accuracy: SeedStat,
}

fn weight_ablation(ctx: &Context) -> Result<Output> {
    let start = Instant::now();
    let config = ctx.config;
    let kinds = &config.experiment.losses;
    let jobs = loss_jobs(kinds, &ctx.seeds);
    let runs = par_map(&jobs, |&(kind, seed)| train_seed(config, compared_spec(config, kind)?, seed, RunOptions::default()))?;
    let mut rows = Vec::new();
    let mut table = CsvTable::new(
        "weight_ablation",
        &["loss", "ece_pre_pct", "ece_post_pct", "ada_ece_pre_pct", "ada_ece_post_pct", "temperature", "accuracy"],
    );
    for &kind in kinds {
        let evals: Vec<&Evaluation> = runs.iter().filter(|r| r.loss.kind == kind).map(|r| &r.evaluation).collect();
        let s = Summary::of(&evals);
        table.push(vec![
            display_name(kind).into(),
            (100.0 * s.ece_pre.mean).into(),
            (100.0 * s.ece_post.mean).into(),
            (100.0 * s.ada_ece_pre.mean).into(),
            (100.0 * s.ada_ece_post.mean).into(),
            s.temperature.mean.into(),
            s.accuracy.mean.into(),
        ]);
        rows.push(AblationRow {
            loss: display_name(kind).to_string(),
            ece_pre: s.ece_pre,
            ece_post: s.ece_post,
            ada_ece_pre: s.ada_ece_pre,
            ada_ece_post: s.ada_ece_post,
            temperature: s.temperature,
            accuracy: s.accuracy,
        });
    }
    let per_seed = metrics_table(
        "weight_ablation_per_seed",
        &runs.iter().map(|r| (r.seed, r.loss.kind, &r.evaluation)).collect::<Vec<_>>(),
    );
    #[derive(Serialize)]
    struct Body<'a> {
        rows: Vec<AblationRow>,
        runs: &'a [SeedRun],
    }
    let mut out = envelope("weight-ablation", ctx, start, &ctx.seeds, Body { rows, runs: &runs })?;
    out.tables = vec![table, per_seed];
    Ok(out)
}
