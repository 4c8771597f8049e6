//! Gaussian-mixture toy benchmark with analytic class posteriors.
//!
//! Points come from `K` Gaussians sharing one covariance, so the true
//! posterior `η(x)` is known exactly and the calibrated error of a trained
//! model can be measured directly rather than estimated from bins.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{dual_focal_runner_up, LossKind, LossSpec};
use crate::metrics::pearson;
use crate::numkit::{log_sum_exp, one_hot, softmax, LabeledBatch, Matrix, ProbVector, RngStream};
use crate::trainer::{predict, train, TrainConfig};

pub const DEFAULT_NUM_CLASSES: usize = 5;
pub const DEFAULT_TRAIN_PER_CLASS: usize = 10_000;
pub const DEFAULT_TEST_PER_CLASS: usize = 1_000;
pub const MEAN_RANGE: (f64, f64) = (-10.0, 10.0);

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GaussianMixtureSpec {
    pub num_classes: usize,
    pub means: Vec<Vec<f64>>,
    pub covariance: Matrix,
    pub priors: Vec<f64>,
    #[serde(skip)]
    chol: Matrix,
    #[serde(skip)]
    log_det: f64,
}

impl GaussianMixtureSpec {
    pub fn new(means: Vec<Vec<f64>>, covariance: Matrix, priors: Vec<f64>) -> Result<Self> {
        let k = means.len();
        if k < 2 {
            return Err(Error::domain("GaussianMixtureSpec", "need at least two components"));
        }
        let d = means[0].len();
        if d == 0 || means.iter().any(|m| m.len() != d || m.iter().any(|v| !v.is_finite())) {
            return Err(Error::domain("GaussianMixtureSpec", "means must be finite and share one dimension"));
        }
        if covariance.rows() != d || covariance.cols() != d {
            return Err(Error::domain("GaussianMixtureSpec", format!("covariance must be {d}×{d}")));
        }
        for i in 0..d {
            for j in 0..i {
                if covariance.get(i, j) != covariance.get(j, i) {
                    return Err(Error::domain("GaussianMixtureSpec", "covariance is not symmetric"));
                }
            }
        }
        if priors.len() != k {
            return Err(Error::domain("GaussianMixtureSpec", "one prior per component"));
        }
        ProbVector::new(priors.clone())?;
        if priors.iter().any(|&p| p <= 0.0) {
            return Err(Error::domain("GaussianMixtureSpec", "priors must be positive"));
        }
        let chol = cholesky(&covariance)?;
        let log_det = 2.0 * (0..d).map(|i| chol.get(i, i).ln()).sum::<f64>();
        Ok(GaussianMixtureSpec { num_classes: k, means, covariance, priors, chol, log_det })
    }

    /// Identity covariance and uniform priors.
    pub fn isotropic(means: Vec<Vec<f64>>) -> Result<Self> {
        let k = means.len();
        let d = means.first().map_or(0, Vec::len);
        let mut cov = Matrix::zeros(d, d);
        for i in 0..d {
            cov.set(i, i, 1.0)?;
        }
        GaussianMixtureSpec::new(means, cov, vec![1.0 / k as f64; k])
    }

    /// `num_classes` 2-D means drawn uniformly from the box `[−10, 10]²`.
    pub fn random(num_classes: usize, rng: &mut RngStream) -> Result<Self> {
        let means = (0..num_classes)
            .map(|_| (0..2).map(|_| rng.uniform_range(MEAN_RANGE.0, MEAN_RANGE.1)).collect())
            .collect();
        GaussianMixtureSpec::isotropic(means)
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    /// Same means and covariance, different priors.
    pub fn with_priors(&self, priors: Vec<f64>) -> Result<Self> {
        GaussianMixtureSpec::new(self.means.clone(), self.covariance.clone(), priors)
    }

    /// `log N(x; μ_k, Σ)`.
    pub fn log_pdf(&self, x: &[f64], k: usize) -> f64 {
        let d = self.dim();
        let diff: Vec<f64> = x.iter().zip(&self.means[k]).map(|(a, b)| a - b).collect();
        // forward substitution L z = diff, then the Mahalanobis term is ‖z‖²
        let mut z = vec![0.0; d];
        for i in 0..d {
            let s: f64 = (0..i).map(|j| self.chol.get(i, j) * z[j]).sum();
            z[i] = (diff[i] - s) / self.chol.get(i, i);
        }
        let maha: f64 = z.iter().map(|v| v * v).sum();
        -0.5 * (maha + self.log_det + d as f64 * (2.0 * std::f64::consts::PI).ln())
    }
}

fn cholesky(a: &Matrix) -> Result<Matrix> {
    let n = a.rows();
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l.get(i, k) * l.get(j, k)).sum();
            if i == j {
                let v = a.get(i, i) - s;
                if !(v > 0.0) {
                    return Err(Error::domain("GaussianMixtureSpec", "covariance is not positive definite"));
                }
                l.set(i, j, v.sqrt())?;
            } else {
                l.set(i, j, (a.get(i, j) - s) / l.get(j, j))?;
            }
        }
    }
    Ok(l)
}

/// `per_class` points from every component, class-major order.
pub fn sample_mixture(spec: &GaussianMixtureSpec, per_class: usize, rng: &mut RngStream) -> Result<LabeledBatch> {
    if per_class == 0 {
        return Err(Error::domain("sample_mixture", "per_class must be at least 1"));
    }
    let d = spec.dim();
    let mut data = Vec::with_capacity(spec.num_classes * per_class * d);
    let mut labels = Vec::with_capacity(spec.num_classes * per_class);
    for (k, mean) in spec.means.iter().enumerate() {
        for _ in 0..per_class {
            let z = rng.standard_normal(d)?;
            for i in 0..d {
                let lz: f64 = (0..=i).map(|j| spec.chol.get(i, j) * z[j]).sum();
                data.push(mean[i] + lz);
            }
            labels.push(k);
        }
    }
    LabeledBatch::new(Matrix::from_vec(labels.len(), d, data)?, labels, spec.num_classes)
}

#[derive(Debug, Clone)]
pub struct ToyDataset {
    pub train: LabeledBatch,
    pub test: LabeledBatch,
    pub spec: GaussianMixtureSpec,
}

impl ToyDataset {
    pub fn generate(
        spec: GaussianMixtureSpec,
        train_per_class: usize,
        test_per_class: usize,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let train = sample_mixture(&spec, train_per_class, &mut rng.fork(1))?;
        let test = sample_mixture(&spec, test_per_class, &mut rng.fork(2))?;
        Ok(ToyDataset { train, test, spec })
    }
}

/// `η_k(x) = π_k N(x; μ_k) / Σ_j π_j N(x; μ_j)`, evaluated in log space.
pub fn true_posterior(x: &[f64], spec: &GaussianMixtureSpec) -> ProbVector {
    let logs: Vec<f64> = (0..spec.num_classes).map(|k| spec.priors[k].ln() + spec.log_pdf(x, k)).collect();
    let lse = log_sum_exp(&logs).expect("at least two components");
    let probs: Vec<f64> = logs.iter().map(|l| (l - lse).exp()).collect();
    let total: f64 = probs.iter().sum();
    ProbVector::new(probs.into_iter().map(|p| p / total).collect()).expect("normalised posterior")
}

/// How `‖η(x) − p̂(x)‖` is read.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ErrorReading {
    /// Euclidean norm over the whole probability vector.
    #[default]
    FullVector,
    /// `|η_c − p̂_c|` at the predicted class `c`.
    PredictedClass,
}

pub fn true_calibration_error(pred: &ProbVector, eta: &ProbVector) -> Result<f64> {
    true_calibration_error_with(pred, eta, ErrorReading::FullVector)
}

pub fn true_calibration_error_with(pred: &ProbVector, eta: &ProbVector, reading: ErrorReading) -> Result<f64> {
    if pred.len() != eta.len() {
        return Err(Error::domain(
            "true_calibration_error",
            format!("prediction has {} classes, posterior has {}", pred.len(), eta.len()),
        ));
    }
    Ok(match reading {
        ErrorReading::FullVector => pred.iter().zip(eta.iter()).map(|(p, e)| (p - e) * (p - e)).sum::<f64>().sqrt(),
        ErrorReading::PredictedClass => {
            let c = pred.argmax();
            (eta[c] - pred[c]).abs()
        }
    })
}

/// Which class the uncertainty metrics treat as the target `y`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricLabel {
    /// The sampled ground-truth label.
    #[default]
    Observed,
    /// The model's own prediction, making every metric label-free like `c(x)`.
    Predicted,
}

/// Candidate per-sample uncertainty signals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "metric", rename_all = "kebab-case")]
pub enum UncertaintyMetric {
    Focal { gamma: f64 },
    DualFocal { gamma: f64 },
    Gbs { gamma: f64, beta: f64 },
    /// The calibrated error itself; correlates perfectly with the target.
    TrueError,
}

impl UncertaintyMetric {
    pub fn name(&self) -> &'static str {
        match self {
            UncertaintyMetric::Focal { .. } => "focal",
            UncertaintyMetric::DualFocal { .. } => "dual-focal",
            UncertaintyMetric::Gbs { .. } => "gbs",
            UncertaintyMetric::TrueError => "true-error",
        }
    }

    pub fn value(&self, pred: &ProbVector, label: usize, eta: &ProbVector, reading: ErrorReading) -> Result<f64> {
        let p_t = pred[label];
        Ok(match *self {
            UncertaintyMetric::Focal { gamma } => (1.0 - p_t).max(0.0).powf(gamma),
            UncertaintyMetric::DualFocal { gamma } => {
                let j = dual_focal_runner_up(pred, label);
                (1.0 - p_t + pred[j]).max(0.0).powf(gamma)
            }
            UncertaintyMetric::Gbs { gamma, beta } => {
                crate::losses::gbs_weight(pred, &one_hot(label, pred.len())?, gamma, beta)
            }
            UncertaintyMetric::TrueError => true_calibration_error_with(pred, eta, reading)?,
        })
    }

    /// Focal, dual-focal and gBS over `γ ∈ {1..8}` (gBS also over `β ∈ {1, 2}`).
    pub fn search_grid() -> Vec<UncertaintyMetric> {
        let gammas = (1..=8).map(f64::from);
        let mut out: Vec<UncertaintyMetric> = gammas.clone().map(|gamma| UncertaintyMetric::Focal { gamma }).collect();
        out.extend(gammas.clone().map(|gamma| UncertaintyMetric::DualFocal { gamma }));
        for beta in [1.0, 2.0] {
            out.extend(gammas.clone().map(|gamma| UncertaintyMetric::Gbs { gamma, beta }));
        }
        out
    }
}

/// Pearson correlation between each metric and the calibrated error over `data`.
pub fn metric_correlations(
    preds: &[ProbVector],
    data: &LabeledBatch,
    spec: &GaussianMixtureSpec,
    metrics: &[UncertaintyMetric],
    reading: ErrorReading,
    label: MetricLabel,
) -> Result<Vec<f64>> {
    if preds.len() != data.len() {
        return Err(Error::domain("metric_correlations", "one prediction per sample required"));
    }
    let etas: Vec<ProbVector> = (0..data.len()).map(|i| true_posterior(data.features().row(i), spec)).collect();
    let errors = preds
        .iter()
        .zip(&etas)
        .map(|(p, e)| true_calibration_error_with(p, e, reading))
        .collect::<Result<Vec<_>>>()?;
    metrics
        .iter()
        .map(|m| {
            let us = preds
                .iter()
                .zip(&etas)
                .zip(data.labels())
                .map(|((p, e), &y)| {
                    let y = match label {
                        MetricLabel::Observed => y,
                        MetricLabel::Predicted => p.argmax(),
                    };
                    m.value(p, y, e, reading)
                })
                .collect::<Result<Vec<_>>>()?;
            pearson(&us, &errors)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrelationConfig {
    pub seeds: Vec<u64>,
    pub num_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub epochs: usize,
    /// Loss the toy model is trained with.
    pub loss: LossSpec,
    pub reading: ErrorReading,
    pub label: MetricLabel,
}

impl Default for CorrelationConfig {
    fn default() -> Self {
        CorrelationConfig {
            seeds: vec![1, 2, 3, 4, 5],
            num_classes: DEFAULT_NUM_CLASSES,
            train_per_class: DEFAULT_TRAIN_PER_CLASS,
            test_per_class: DEFAULT_TEST_PER_CLASS,
            epochs: 5,
            loss: LossSpec::with_defaults(LossKind::Ce),
            reading: ErrorReading::FullVector,
            label: MetricLabel::Observed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CandidateScore {
    pub metric: UncertaintyMetric,
    pub per_run: Vec<f64>,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricResult {
    pub name: &'static str,
    pub best: UncertaintyMetric,
    pub pearson: f64,
    pub per_run: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrelationReport {
    pub num_runs: usize,
    pub results: Vec<MetricResult>,
    pub candidates: Vec<CandidateScore>,
    pub test_accuracy: Vec<f64>,
}

impl CorrelationReport {
    pub fn result(&self, name: &str) -> Option<&MetricResult> {
        self.results.iter().find(|r| r.name == name)
    }
}

/// Trains one toy model per seed, then grid-searches each metric family for
/// the hyperparameters with the highest mean correlation across runs.
pub fn correlation_experiment(config: &CorrelationConfig) -> Result<CorrelationReport> {
    if config.seeds.is_empty() {
        return Err(Error::domain("correlation_experiment", "need at least one run"));
    }
    let grid = UncertaintyMetric::search_grid();
    let runs: Vec<Result<(Vec<f64>, f64)>> = std::thread::scope(|s| {
        let handles: Vec<_> = config
            .seeds
            .iter()
            .map(|&seed| {
                let grid = &grid;
                s.spawn(move || correlation_run(config, seed, grid))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("correlation run panicked")).collect()
    });
    let runs = runs.into_iter().collect::<Result<Vec<_>>>()?;

    let candidates: Vec<CandidateScore> = grid
        .iter()
        .enumerate()
        .map(|(i, &metric)| {
            let per_run: Vec<f64> = runs.iter().map(|(c, _)| c[i]).collect();
            let mean = per_run.iter().sum::<f64>() / per_run.len() as f64;
            CandidateScore { metric, per_run, mean }
        })
        .collect();
    let results = ["focal", "dual-focal", "gbs"]
        .into_iter()
        .map(|name| {
            let best = candidates
                .iter()
                .filter(|c| c.metric.name() == name)
                .fold(None::<&CandidateScore>, |acc, c| match acc {
                    Some(b) if b.mean >= c.mean => Some(b),
                    _ => Some(c),
                })
                .expect("grid covers every family");
            MetricResult { name, best: best.metric, pearson: best.mean, per_run: best.per_run.clone() }
        })
        .collect();
    Ok(CorrelationReport {
        num_runs: runs.len(),
        results,
        candidates,
        test_accuracy: runs.iter().map(|(_, a)| *a).collect(),
    })
}

fn correlation_run(config: &CorrelationConfig, seed: u64, grid: &[UncertaintyMetric]) -> Result<(Vec<f64>, f64)> {
    let rng = RngStream::new(seed);
    let spec = GaussianMixtureSpec::random(config.num_classes, &mut rng.fork(10))?;
    let data = ToyDataset::generate(spec, config.train_per_class, config.test_per_class, &mut rng.fork(11))?;
    let train_config = TrainConfig::toy(config.loss, config.epochs, seed);
    let (model, _) = train(&train_config, &data.train, &data.test)?;
    let preds = predict(&model, &data.test)?;
    let corr = metric_correlations(preds.probs(), &data.test, &data.spec, grid, config.reading, config.label)?;
    Ok((corr, preds.accuracy()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BiasCheck {
    pub estimate: f64,
    pub expected: f64,
    pub stderr: f64,
}

/// Monte-Carlo check that `‖p̂ − η‖² − E_y ‖p̂ − y‖²` equals `Σ η_k (η_k − 1)`.
pub fn mc_bias_check(eta: &ProbVector, pred: &ProbVector, draws: usize, rng: &mut RngStream) -> Result<BiasCheck> {
    if draws < 1000 {
        return Err(Error::domain("mc_bias_check", format!("need at least 1000 draws, got {draws}")));
    }
    if eta.len() != pred.len() {
        return Err(Error::domain("mc_bias_check", "posterior and prediction differ in length"));
    }
    let k = eta.len();
    let mut counts = vec![0u64; k];
    for _ in 0..draws {
        counts[rng.categorical(eta)] += 1;
    }
    // ‖p̂ − e_j‖² only depends on the drawn class
    let sq: Vec<f64> = (0..k)
        .map(|j| pred.iter().enumerate().map(|(i, &p)| if i == j { (p - 1.0) * (p - 1.0) } else { p * p }).sum())
        .collect();
    let n = draws as f64;
    let mean = counts.iter().zip(&sq).map(|(&c, s)| c as f64 * s).sum::<f64>() / n;
    let var = counts.iter().zip(&sq).map(|(&c, s)| c as f64 * (s - mean) * (s - mean)).sum::<f64>() / (n - 1.0);
    let direct: f64 = pred.iter().zip(eta.iter()).map(|(p, e)| (p - e) * (p - e)).sum();
    Ok(BiasCheck {
        estimate: direct - mean,
        expected: eta.iter().map(|e| e * (e - 1.0)).sum(),
        stderr: (var / n).sqrt(),
    })
}

/// Which objective the fixed-point search stationarises.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FixedPointTarget {
    /// Detached weight `‖q − η‖_β^γ` on cross-entropy against `η`.
    #[default]
    Posterior,
    /// `Σ_y η_y · loss(q, e_y)`, each one-hot label with its own weight.
    Label,
}

/// Expected logit gradient at `q` together with the mean detached weight.
pub fn expected_grad_logits(q: &ProbVector, eta: &ProbVector, loss: &LossSpec, target: FixedPointTarget) -> Result<(Vec<f64>, f64)> {
    let k = eta.len();
    if q.len() != k {
        return Err(Error::domain("expected_grad_logits", "q and η differ in length"));
    }
    match (target, loss.weight()) {
        (FixedPointTarget::Posterior, Some(crate::losses::UncertaintyWeight::Gbs { gamma, beta })) => {
            let s: f64 = q.iter().zip(eta.iter()).map(|(a, b)| (a - b).abs().powf(beta)).sum();
            let w = if gamma == 0.0 { 1.0 } else { s.powf(gamma / beta) };
            Ok((q.iter().zip(eta.iter()).map(|(a, b)| w * (a - b)).collect(), w))
        }
        (FixedPointTarget::Posterior, None) if loss.kind == LossKind::Ce => {
            Ok((q.iter().zip(eta.iter()).map(|(a, b)| a - b).collect(), 1.0))
        }
        (FixedPointTarget::Posterior, _) => Err(Error::domain(
            "expected_grad_logits",
            format!("posterior target supports ce and gBS-weighted losses, not {}", loss.kind),
        )),
        (FixedPointTarget::Label, _) => {
            let mut grad = vec![0.0; k];
            let mut weight = 0.0;
            for (y, &e) in eta.iter().enumerate() {
                if e == 0.0 {
                    continue;
                }
                let eval = loss.evaluate(q, &one_hot(y, k)?);
                weight += e * eval.weight;
                for (g, v) in grad.iter_mut().zip(&eval.grad_logits) {
                    *g += e * v;
                }
            }
            Ok((grad, weight))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FixedPointTrace {
    pub q: ProbVector,
    pub iterations: usize,
    /// Norm of the expected logit gradient at the returned `q`.
    pub grad_norm: f64,
    /// Largest logit update in the final iteration.
    pub last_step: f64,
}

/// Finds `q` on the simplex where the expected loss gradient vanishes.
///
/// Iterates on logits with damped Newton steps. The Jacobian treats the
/// weight as a constant (it is detached in the loss), which leaves the
/// softmax Hessian `W̄ (diag q − q qᵀ)`; the last logit is pinned at 0.
/// `lr` is the damping factor in `(0, 1]`.
pub fn simplex_fixed_point(eta: &ProbVector, loss: &LossSpec, lr: f64, steps: usize) -> Result<FixedPointTrace> {
    simplex_fixed_point_with(eta, loss, lr, steps, FixedPointTarget::Posterior)
}

pub fn simplex_fixed_point_with(
    eta: &ProbVector,
    loss: &LossSpec,
    lr: f64,
    steps: usize,
    target: FixedPointTarget,
) -> Result<FixedPointTrace> {
    if !matches!(loss.kind, LossKind::Ce | LossKind::BsceGra) {
        return Err(Error::domain("simplex_fixed_point", format!("supports ce and bsce-gra, not {}", loss.kind)));
    }
    if eta.iter().any(|&e| e <= 0.0) {
        return Err(Error::domain("simplex_fixed_point", "η must lie strictly inside the simplex"));
    }
    if !(lr > 0.0 && lr <= 1.0) {
        return Err(Error::domain("simplex_fixed_point", format!("damping must be in (0, 1], got {lr}")));
    }
    let k = eta.len();
    let mut logits = vec![0.0; k];
    let mut q = softmax(&logits, 1.0)?;
    let mut iterations = 0;
    let mut last_step = f64::INFINITY;
    while iterations < steps {
        let (grad, w) = expected_grad_logits(&q, eta, loss, target)?;
        if w == 0.0 || grad.iter().all(|&g| g == 0.0) {
            last_step = 0.0;
            break;
        }
        let rhs: Vec<f64> = grad[..k - 1].iter().map(|g| -g / w).collect();
        let mut h = Matrix::zeros(k - 1, k - 1);
        for i in 0..k - 1 {
            for j in 0..k - 1 {
                let v = if i == j { q[i] - q[i] * q[j] } else { -q[i] * q[j] };
                h.set(i, j, v)?;
            }
        }
        let delta = solve_spd(&h, &rhs)?;
        last_step = delta.iter().fold(0.0f64, |m, d| m.max(d.abs())) * lr;
        for (z, d) in logits.iter_mut().zip(&delta) {
            *z += lr * d;
        }
        q = softmax(&logits, 1.0)?;
        iterations += 1;
        if last_step < 1e-15 {
            break;
        }
    }
    let (grad, _) = expected_grad_logits(&q, eta, loss, target)?;
    Ok(FixedPointTrace { q, iterations, grad_norm: grad.iter().map(|g| g * g).sum::<f64>().sqrt(), last_step })
}

fn solve_spd(a: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    let l = cholesky(a).map_err(|_| Error::domain("simplex_fixed_point", "softmax Jacobian is singular"))?;
    let n = b.len();
    let mut y = vec![0.0; n];
    for i in 0..n {
        let s: f64 = (0..i).map(|j| l.get(i, j) * y[j]).sum();
        y[i] = (b[i] - s) / l.get(i, i);
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|j| l.get(j, i) * x[j]).sum();
        x[i] = (y[i] - s) / l.get(i, i);
    }
    Ok(x)
}
