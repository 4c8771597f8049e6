//! Run configuration: a TOML file with one table per concern.
//!
//! ```toml
//! [run]
//! seeds = [1, 42, 71]
//! out = "runs/bsce-gra"
//!
//! [data.synthetic]
//! num_classes = 5
//!
//! [loss]
//! kind = "bsce-gra"
//! gamma = 4
//! beta = 2
//!
//! [train]
//! epochs = 20
//! ```
//!
//! Every table rejects keys it does not know.

use std::path::{Path, PathBuf};

use gradcal::calibrate::TemperatureGrid;
use gradcal::gaussbench::{ErrorReading, MetricLabel};
use gradcal::losses::{LossKind, LossSpec, DEFAULT_GBS_BETA};
use gradcal::trainer::{LrSchedule, LrStep, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub loss: LossSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub experiment: ExperimentSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    /// Shorthand for a single-element `seeds`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default)]
    pub seeds: Vec<u64>,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default = "default_formats")]
    pub formats: Vec<Format>,
}

fn default_out() -> PathBuf {
    PathBuf::from("runs")
}

fn default_formats() -> Vec<Format> {
    vec![Format::Json, Format::Csv]
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection { seed: None, seeds: Vec::new(), out: default_out(), formats: default_formats() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticData>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv: Option<CsvData>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub idx: Option<IdxData>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticData {
    #[serde(default = "default_num_classes")]
    pub num_classes: usize,
    #[serde(default = "default_train_per_class")]
    pub train_per_class: usize,
    #[serde(default = "default_test_per_class")]
    pub test_per_class: usize,
    /// Fixed component means; drawn from `[−10, 10]²` per seed when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub means: Option<Vec<[f64; 2]>>,
    /// Draw the mixture from this seed instead of the run seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_seed: Option<u64>,
}

fn default_num_classes() -> usize {
    gradcal::gaussbench::DEFAULT_NUM_CLASSES
}
fn default_train_per_class() -> usize {
    gradcal::gaussbench::DEFAULT_TRAIN_PER_CLASS
}
fn default_test_per_class() -> usize {
    gradcal::gaussbench::DEFAULT_TEST_PER_CLASS
}

impl Default for SyntheticData {
    fn default() -> Self {
        SyntheticData {
            num_classes: default_num_classes(),
            train_per_class: default_train_per_class(),
            test_per_class: default_test_per_class(),
            means: None,
            data_seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvData {
    pub train: PathBuf,
    pub test: PathBuf,
    /// Defaults to one more than the largest label seen.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxData {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
}

/// The one dataset a run reads.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic(SyntheticData),
    Csv(CsvData),
    Idx(IdxData),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSection {
    #[serde(default = "default_loss_kind")]
    pub kind: LossKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
}

fn default_loss_kind() -> LossKind {
    LossKind::Ce
}

impl Default for LossSection {
    fn default() -> Self {
        LossSection { kind: LossKind::Ce, gamma: None, beta: None }
    }
}

impl LossSection {
    pub fn spec(&self) -> Result<LossSpec> {
        loss_spec(self.kind, self.gamma, self.beta)
    }
}

/// `kind` with any explicitly given hyperparameters, defaults for the rest.
pub fn loss_spec(kind: LossKind, gamma: Option<f64>, beta: Option<f64>) -> Result<LossSpec> {
    let defaults = LossSpec::with_defaults(kind);
    LossSpec::new(kind, gamma.unwrap_or(defaults.gamma), beta.unwrap_or(DEFAULT_GBS_BETA))
        .map_err(|e| CliError::Config(domain_message(e)))
}

fn domain_message(e: gradcal::Error) -> String {
    match e {
        gradcal::Error::Domain { msg, .. } => msg,
        other => other.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Constant learning rate; mutually exclusive with `schedule`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<Vec<LrStep>>,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    /// Training rows held out for temperature fitting.
    #[serde(default = "default_validation_size")]
    pub validation_size: usize,
    #[serde(default)]
    pub log_grad_norms_at: Vec<usize>,
    /// Write a checkpoint every this many epochs (0 = only at the end).
    #[serde(default)]
    pub checkpoint_every: usize,
}

fn default_epochs() -> usize {
    5
}
fn default_batch_size() -> usize {
    128
}
fn default_momentum() -> f64 {
    0.9
}
fn default_weight_decay() -> f64 {
    5e-4
}
fn default_hidden() -> Vec<usize> {
    vec![64, 64]
}
fn default_validation_size() -> usize {
    1000
}

pub const DEFAULT_LR: f64 = 0.01;

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            lr: None,
            schedule: None,
            momentum: default_momentum(),
            weight_decay: default_weight_decay(),
            hidden: default_hidden(),
            validation_size: default_validation_size(),
            log_grad_norms_at: Vec::new(),
            checkpoint_every: 0,
        }
    }
}

impl TrainSection {
    pub fn lr_schedule(&self) -> Result<LrSchedule> {
        let schedule = match (&self.lr, &self.schedule) {
            (Some(_), Some(_)) => return Err(CliError::Config("[train] sets both lr and schedule".into())),
            (None, Some(steps)) => LrSchedule::new(steps.clone()),
            (lr, None) => LrSchedule::constant(lr.unwrap_or(DEFAULT_LR)),
        };
        schedule.map_err(|e| CliError::Config(format!("[train] {}", domain_message(e))))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default = "default_num_bins")]
    pub num_bins: usize,
    #[serde(default = "default_t_min")]
    pub t_min: f64,
    #[serde(default = "default_t_max")]
    pub t_max: f64,
    #[serde(default = "default_t_step")]
    pub t_step: f64,
}

fn default_num_bins() -> usize {
    gradcal::metrics::DEFAULT_NUM_BINS
}
fn default_t_min() -> f64 {
    TemperatureGrid::default().lo
}
fn default_t_max() -> f64 {
    TemperatureGrid::default().hi
}
fn default_t_step() -> f64 {
    TemperatureGrid::default().step
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { num_bins: default_num_bins(), t_min: default_t_min(), t_max: default_t_max(), t_step: default_t_step() }
    }
}

impl EvalSection {
    pub fn grid(&self) -> TemperatureGrid {
        TemperatureGrid { lo: self.t_min, hi: self.t_max, step: self.t_step }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    #[serde(default = "default_grad_factor_gammas")]
    pub grad_factor_gammas: Vec<f64>,
    /// `p` grid resolution for grad-factor: `p = i / points`, `i = 1..=points`.
    #[serde(default = "default_grad_factor_points")]
    pub grad_factor_points: usize,
    #[serde(default = "default_correlation_seeds")]
    pub correlation_seeds: Vec<u64>,
    #[serde(default)]
    pub correlation_reading: ErrorReading,
    #[serde(default)]
    pub correlation_label: MetricLabel,
    #[serde(default = "default_fixed_point_cases")]
    pub fixed_point_cases: usize,
    #[serde(default = "default_fixed_point_max_classes")]
    pub fixed_point_max_classes: usize,
    /// Losses compared by weight-ablation.
    #[serde(default = "default_compare_losses")]
    pub losses: Vec<LossKind>,
    /// Losses traced by ece-over-epochs and grad-vs-brier.
    #[serde(default = "default_curve_losses")]
    pub curve_losses: Vec<LossKind>,
}

fn default_grad_factor_gammas() -> Vec<f64> {
    vec![1.0, 2.0, 3.0, 5.0]
}
fn default_grad_factor_points() -> usize {
    1000
}
fn default_correlation_seeds() -> Vec<u64> {
    vec![1, 2, 3, 4, 5]
}
fn default_fixed_point_cases() -> usize {
    20
}
fn default_fixed_point_max_classes() -> usize {
    6
}
fn default_compare_losses() -> Vec<LossKind> {
    vec![
        LossKind::Focal,
        LossKind::FocalGra,
        LossKind::DualFocal,
        LossKind::DualFocalGra,
        LossKind::Bsce,
        LossKind::BsceGra,
    ]
}

fn default_curve_losses() -> Vec<LossKind> {
    vec![LossKind::Ce, LossKind::Focal, LossKind::DualFocal, LossKind::BsceGra]
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection {
            grad_factor_gammas: default_grad_factor_gammas(),
            grad_factor_points: default_grad_factor_points(),
            correlation_seeds: default_correlation_seeds(),
            correlation_reading: ErrorReading::default(),
            correlation_label: MetricLabel::default(),
            fixed_point_cases: default_fixed_point_cases(),
            fixed_point_max_classes: default_fixed_point_max_classes(),
            losses: default_compare_losses(),
            curve_losses: default_curve_losses(),
        }
    }
}

pub const DEFAULT_SEED: u64 = 42;

impl RunConfig {
    /// Seeds to run, `[42]` when none are configured.
    pub fn seeds(&self) -> Vec<u64> {
        match (self.run.seed, self.run.seeds.is_empty()) {
            (Some(s), _) => vec![s],
            (None, false) => self.run.seeds.clone(),
            (None, true) => vec![DEFAULT_SEED],
        }
    }

    /// The configured dataset; synthetic defaults when no source is given.
    pub fn data_source(&self) -> DataSource {
        let d = &self.data;
        if let Some(c) = &d.csv {
            DataSource::Csv(c.clone())
        } else if let Some(i) = &d.idx {
            DataSource::Idx(i.clone())
        } else {
            DataSource::Synthetic(d.synthetic.clone().unwrap_or_default())
        }
    }

    pub fn loss_spec(&self) -> Result<LossSpec> {
        self.loss.spec()
    }

    pub fn train_config(&self, loss: LossSpec, seed: u64) -> Result<TrainConfig> {
        let t = &self.train;
        let config = TrainConfig {
            loss,
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr_schedule: t.lr_schedule()?,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            seed,
            num_bins: self.eval.num_bins,
            hidden: t.hidden.clone(),
            log_grad_norms_at: t.log_grad_norms_at.clone(),
        };
        config.validate().map_err(|e| CliError::Config(format!("[train] {}", domain_message(e))))?;
        Ok(config)
    }

    /// Checks everything that serde's structural pass cannot.
    pub fn validate(&self) -> Result<()> {
        if self.run.seed.is_some() && !self.run.seeds.is_empty() {
            return Err(CliError::Config("[run] sets both seed and seeds".into()));
        }
        if self.run.formats.is_empty() {
            return Err(CliError::Config("[run] formats must name at least one of csv, json".into()));
        }
        let sources = [self.data.synthetic.is_some(), self.data.csv.is_some(), self.data.idx.is_some()];
        if sources.iter().filter(|&&s| s).count() > 1 {
            return Err(CliError::Config(
                "exactly one of [data.synthetic], [data.csv], [data.idx] may be given".into(),
            ));
        }
        if let Some(s) = &self.data.synthetic {
            if s.num_classes < 2 || s.train_per_class == 0 || s.test_per_class == 0 {
                return Err(CliError::Config(
                    "[data.synthetic] needs num_classes ≥ 2 and positive per-class counts".into(),
                ));
            }
            if let Some(means) = &s.means {
                if means.len() != s.num_classes {
                    return Err(CliError::Config(format!(
                        "[data.synthetic] {} means given for {} classes",
                        means.len(),
                        s.num_classes
                    )));
                }
            }
        }
        self.loss_spec()?;
        self.train_config(self.loss_spec()?, DEFAULT_SEED)?;
        if self.train.epochs == 0 {
            return Err(CliError::Config("[train] epochs must be at least 1".into()));
        }
        let e = &self.eval;
        if e.num_bins == 0 {
            return Err(CliError::Config("[eval] num_bins must be at least 1".into()));
        }
        if !(e.t_step > 0.0 && e.t_min > 0.0 && e.t_max >= e.t_min) {
            return Err(CliError::Config("[eval] temperature grid needs 0 < t_min ≤ t_max and t_step > 0".into()));
        }
        let x = &self.experiment;
        if x.grad_factor_points < 2 {
            return Err(CliError::Config("[experiment] grad_factor_points must be at least 2".into()));
        }
        if x.grad_factor_gammas.iter().any(|g| !(*g >= 0.0)) {
            return Err(CliError::Config("[experiment] gamma must be ≥ 0".into()));
        }
        if x.fixed_point_max_classes < 2 {
            return Err(CliError::Config("[experiment] fixed_point_max_classes must be at least 2".into()));
        }
        if x.correlation_seeds.is_empty() || x.losses.is_empty() || x.curve_losses.is_empty() {
            return Err(CliError::Config(
                "[experiment] correlation_seeds, losses and curve_losses must be non-empty".into(),
            ));
        }
        Ok(())
    }
}

pub fn parse_config_str(text: &str) -> Result<RunConfig> {
    let config: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string().trim_end().to_string()))?;
    config.validate()?;
    Ok(config)
}

pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_config_str(&text).map_err(|e| match e {
        CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}
