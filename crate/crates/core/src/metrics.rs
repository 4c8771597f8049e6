//! Calibration metrics.
//!
//! Values are raw fractions in `[0, 1]`; presentation code multiplies by 100
//! where a percentage is wanted.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::numkit::{LabelVector, ProbVector};

pub const DEFAULT_NUM_BINS: usize = 15;

/// Predicted distributions with their true labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    probs: Vec<ProbVector>,
    labels: Vec<usize>,
}

impl PredictionSet {
    pub fn new(probs: Vec<ProbVector>, labels: Vec<usize>) -> Result<Self> {
        if probs.len() != labels.len() {
            return Err(Error::domain(
                "PredictionSet::new",
                format!("{} predictions but {} labels", probs.len(), labels.len()),
            ));
        }
        if let Some(first) = probs.first() {
            let k = first.len();
            if let Some(i) = probs.iter().position(|p| p.len() != k) {
                return Err(Error::domain("PredictionSet::new", format!("prediction {i} has a different class count")));
            }
            if let Some(i) = labels.iter().position(|&l| l >= k) {
                return Err(Error::domain("PredictionSet::new", format!("label {} at {i} out of range", labels[i])));
            }
        }
        Ok(PredictionSet { probs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.probs.first().map_or(0, |p| p.len())
    }

    pub fn probs(&self) -> &[ProbVector] {
        &self.probs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    fn confidences(&self) -> impl Iterator<Item = (f64, bool)> + '_ {
        self.probs.iter().zip(&self.labels).map(|(p, &y)| {
            let k = p.argmax();
            (p[k], k == y)
        })
    }

    pub fn accuracy(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        self.confidences().filter(|&(_, ok)| ok).count() as f64 / self.len() as f64
    }

    /// Mean negative log-likelihood of the true class, floored at `1e-12`.
    pub fn nll(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        let total: f64 = self
            .probs
            .iter()
            .zip(&self.labels)
            .map(|(p, &y)| -p[y].max(crate::losses::LOG_EPS).ln())
            .sum();
        total / self.len() as f64
    }

    pub fn mean_brier(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        let total: f64 = self.probs.iter().zip(&self.labels).map(|(p, &y)| brier_score_index(p, y)).sum();
        total / self.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Bin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    /// Mean confidence `C_m`; 0 for an empty bin.
    pub avg_confidence: f64,
    /// Accuracy `A_m`; 0 for an empty bin.
    pub accuracy: f64,
}

/// Per-bin statistics behind an ECE value.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BinReport {
    pub bins: Vec<Bin>,
}

impl BinReport {
    pub fn total_count(&self) -> usize {
        self.bins.iter().map(|b| b.count).sum()
    }

    /// `Σ |B_m|/N · |A_m − C_m|`.
    pub fn calibration_error(&self) -> f64 {
        let n = self.total_count();
        if n == 0 {
            return 0.0;
        }
        self.bins
            .iter()
            .filter(|b| b.count > 0)
            .map(|b| b.count as f64 / n as f64 * (b.accuracy - b.avg_confidence).abs())
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrationReport {
    pub ece: f64,
    pub ada_ece: f64,
    pub classwise_ece: f64,
    pub mean_brier: f64,
    pub accuracy: f64,
    pub nll: f64,
    pub bin_data: BinReport,
}

/// `Σ_i (p̂_i − y_i)²`.
pub fn brier_score(probs: &ProbVector, label: &LabelVector) -> f64 {
    assert_eq!(probs.len(), label.num_classes(), "probability and label lengths differ");
    probs.iter().zip(label.onehot()).map(|(p, y)| (p - y) * (p - y)).sum()
}

fn brier_score_index(probs: &ProbVector, label: usize) -> f64 {
    probs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let d = p - if i == label { 1.0 } else { 0.0 };
            d * d
        })
        .sum()
}

/// Equal-width bin index for `value` with bins `[m/M, (m+1)/M)` and the last bin closed.
pub fn equal_width_bin(value: f64, num_bins: usize) -> usize {
    let m = num_bins as f64;
    let mut idx = ((value * m).floor().max(0.0) as usize).min(num_bins - 1);
    // settle rounding at the edges against the edges themselves
    while idx > 0 && value < idx as f64 / m {
        idx -= 1;
    }
    while idx + 1 < num_bins && value >= (idx + 1) as f64 / m {
        idx += 1;
    }
    idx
}

#[derive(Default, Clone, Copy)]
struct Accum {
    count: usize,
    conf: f64,
    hits: f64,
}

fn equal_width_report(samples: impl Iterator<Item = (f64, f64)>, num_bins: usize) -> BinReport {
    let mut acc = vec![Accum::default(); num_bins];
    for (conf, hit) in samples {
        let a = &mut acc[equal_width_bin(conf, num_bins)];
        a.count += 1;
        a.conf += conf;
        a.hits += hit;
    }
    let m = num_bins as f64;
    BinReport {
        bins: acc
            .iter()
            .enumerate()
            .map(|(i, a)| finish_bin(i as f64 / m, (i + 1) as f64 / m, a))
            .collect(),
    }
}

fn finish_bin(lower: f64, upper: f64, a: &Accum) -> Bin {
    let (avg_confidence, accuracy) = if a.count == 0 {
        (0.0, 0.0)
    } else {
        (a.conf / a.count as f64, a.hits / a.count as f64)
    };
    Bin { lower, upper, count: a.count, avg_confidence, accuracy }
}

fn check_bins(op: &'static str, num_bins: usize) -> Result<()> {
    if num_bins == 0 {
        return Err(Error::domain(op, "num_bins must be at least 1"));
    }
    Ok(())
}

/// Expected calibration error over equal-width confidence bins.
pub fn ece(preds: &PredictionSet, num_bins: usize) -> Result<(f64, BinReport)> {
    check_bins("ece", num_bins)?;
    if preds.is_empty() {
        return Err(Error::domain("ece", "empty prediction set"));
    }
    let report = equal_width_report(preds.confidences().map(|(c, ok)| (c, f64::from(u8::from(ok)))), num_bins);
    Ok((report.calibration_error(), report))
}

/// ECE over equal-mass bins.
///
/// Samples are sorted by confidence (ties by correctness, then input order) and cut into
/// `num_bins` contiguous groups; the first `N mod M` groups hold one extra
/// sample. Bin bounds in the report are the min / max confidence inside.
pub fn ada_ece(preds: &PredictionSet, num_bins: usize) -> Result<(f64, BinReport)> {
    check_bins("ada_ece", num_bins)?;
    let n = preds.len();
    if n < num_bins {
        return Err(Error::domain("ada_ece", format!("{n} samples cannot fill {num_bins} bins")));
    }
    let mut samples: Vec<(f64, bool)> = preds.confidences().collect();
    // Stable sort on (confidence, correctness): only indistinguishable
    // samples keep input order, so the result is permutation invariant.
    samples.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let base = n / num_bins;
    let extra = n % num_bins;
    let mut bins = Vec::with_capacity(num_bins);
    let mut start = 0;
    for m in 0..num_bins {
        let size = base + usize::from(m < extra);
        let chunk = &samples[start..start + size];
        let a = chunk.iter().fold(Accum::default(), |mut a, &(c, ok)| {
            a.count += 1;
            a.conf += c;
            a.hits += f64::from(u8::from(ok));
            a
        });
        bins.push(finish_bin(chunk[0].0, chunk[size - 1].0, &a));
        start += size;
    }
    let report = BinReport { bins };
    Ok((report.calibration_error(), report))
}

/// Mean over classes of the equal-width ECE of `p̂_j` against `1[y = j]`.
pub fn classwise_ece(preds: &PredictionSet, num_bins: usize) -> Result<f64> {
    check_bins("classwise_ece", num_bins)?;
    if preds.is_empty() {
        return Err(Error::domain("classwise_ece", "empty prediction set"));
    }
    let k = preds.num_classes();
    let total: f64 = (0..k)
        .map(|j| {
            let samples = preds.probs.iter().zip(&preds.labels).map(|(p, &y)| (p[j], f64::from(u8::from(y == j))));
            equal_width_report(samples, num_bins).calibration_error()
        })
        .sum();
    Ok(total / k as f64)
}

/// Sample Pearson correlation coefficient.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::domain("pearson", format!("lengths differ: {} vs {}", xs.len(), ys.len())));
    }
    if xs.len() < 2 {
        return Err(Error::domain("pearson", "need at least two points"));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::domain("pearson", "zero variance"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Which probability a confidence histogram bins on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConfidenceOf {
    /// `max_i p̂_i`.
    Prediction,
    /// `p̂_y`, the probability of the true class.
    TrueClass,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(untagged)]
pub enum HistogramCounts {
    Total(usize),
    Split { correct: usize, incorrect: usize },
}

impl HistogramCounts {
    pub fn total(&self) -> usize {
        match *self {
            HistogramCounts::Total(n) => n,
            HistogramCounts::Split { correct, incorrect } => correct + incorrect,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HistogramBin {
    pub lower: f64,
    pub upper: f64,
    pub counts: HistogramCounts,
}

/// Equal-width confidence histogram, optionally split by prediction correctness.
pub fn confidence_histogram(
    preds: &PredictionSet,
    num_bins: usize,
    split_by_correctness: bool,
    source: ConfidenceOf,
) -> Result<Vec<HistogramBin>> {
    check_bins("confidence_histogram", num_bins)?;
    if preds.is_empty() {
        return Err(Error::domain("confidence_histogram", "empty prediction set"));
    }
    let mut correct = vec![0usize; num_bins];
    let mut incorrect = vec![0usize; num_bins];
    for (p, &y) in preds.probs.iter().zip(&preds.labels) {
        let k = p.argmax();
        let value = match source {
            ConfidenceOf::Prediction => p[k],
            ConfidenceOf::TrueClass => p[y],
        };
        let b = equal_width_bin(value, num_bins);
        if k == y {
            correct[b] += 1;
        } else {
            incorrect[b] += 1;
        }
    }
    let m = num_bins as f64;
    Ok((0..num_bins)
        .map(|i| HistogramBin {
            lower: i as f64 / m,
            upper: (i + 1) as f64 / m,
            counts: if split_by_correctness {
                HistogramCounts::Split { correct: correct[i], incorrect: incorrect[i] }
            } else {
                HistogramCounts::Total(correct[i] + incorrect[i])
            },
        })
        .collect())
}

/// All headline metrics for one prediction set.
pub fn calibration_report(preds: &PredictionSet, num_bins: usize) -> Result<CalibrationReport> {
    let (ece, bin_data) = ece(preds, num_bins)?;
    let ada = if preds.len() >= num_bins { ada_ece(preds, num_bins)?.0 } else { ada_ece(preds, preds.len())?.0 };
    Ok(CalibrationReport {
        ece,
        ada_ece: ada,
        classwise_ece: classwise_ece(preds, num_bins)?,
        mean_brier: preds.mean_brier(),
        accuracy: preds.accuracy(),
        nll: preds.nll(),
        bin_data,
    })
}
