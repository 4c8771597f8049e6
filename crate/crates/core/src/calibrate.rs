//! Post-hoc temperature scaling fitted by grid search on ECE.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::metrics::{ece, PredictionSet};
use crate::numkit::{softmax, Matrix, ProbVector};

/// ECE differences below this are treated as ties.
pub const TIE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TemperatureGrid {
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
}

impl Default for TemperatureGrid {
    /// `{0.1, 0.2, …, 10.0}`; `T = 0` is left out.
    fn default() -> Self {
        TemperatureGrid { lo: 0.1, hi: 10.0, step: 0.1 }
    }
}

impl TemperatureGrid {
    /// Grid points as `i · step`, so every point is the nearest double to its decimal.
    pub fn points(&self) -> Vec<f64> {
        let first = (self.lo / self.step).round() as i64;
        let last = (self.hi / self.step).round() as i64;
        // i / 10 rather than i * 0.1 keeps points like 0.3 and 0.7 exact
        let inv = 1.0 / self.step;
        let integral = (inv - inv.round()).abs() < 1e-9;
        (first..=last)
            .map(|i| if integral { i as f64 / inv.round() } else { i as f64 * self.step })
            .filter(|t| *t > 0.0)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TemperatureFit {
    pub temperature: f64,
    pub val_ece_pre: f64,
    pub val_ece_post: f64,
    pub grid: TemperatureGrid,
}

pub fn apply_temperature(logits: &[f64], t: f64) -> Result<ProbVector> {
    softmax(logits, t)
}

/// Softmax of every logit row at temperature `t`.
pub fn predictions_at(logits: &Matrix, labels: &[usize], t: f64) -> Result<PredictionSet> {
    if logits.rows() != labels.len() {
        return Err(Error::domain(
            "predictions_at",
            format!("{} logit rows but {} labels", logits.rows(), labels.len()),
        ));
    }
    let probs = (0..logits.rows()).map(|r| softmax(logits.row(r), t)).collect::<Result<Vec<_>>>()?;
    PredictionSet::new(probs, labels.to_vec())
}

pub fn fit_temperature(val_logits: &Matrix, val_labels: &[usize], num_bins: usize) -> Result<TemperatureFit> {
    fit_temperature_on(val_logits, val_labels, num_bins, TemperatureGrid::default())
}

/// ECE-minimising temperature on `grid`.
///
/// Ties (within [`TIE_TOLERANCE`]) go to the temperature closest to 1, then
/// to the smaller temperature.
pub fn fit_temperature_on(
    val_logits: &Matrix,
    val_labels: &[usize],
    num_bins: usize,
    grid: TemperatureGrid,
) -> Result<TemperatureFit> {
    if val_labels.is_empty() {
        return Err(Error::domain("fit_temperature", "empty validation set"));
    }
    let points = grid.points();
    if points.is_empty() {
        return Err(Error::domain("fit_temperature", "temperature grid has no positive points"));
    }
    let pre = ece(&predictions_at(val_logits, val_labels, 1.0)?, num_bins)?.0;
    let mut best: Option<(f64, f64)> = None;
    for t in points {
        let e = ece(&predictions_at(val_logits, val_labels, t)?, num_bins)?.0;
        best = match best {
            None => Some((t, e)),
            Some((bt, be)) => {
                let better = if (e - be).abs() <= TIE_TOLERANCE {
                    let (d, bd) = ((t - 1.0).abs(), (bt - 1.0).abs());
                    d < bd || (d == bd && t < bt)
                } else {
                    e < be
                };
                Some(if better { (t, e) } else { (bt, be) })
            }
        };
    }
    let (temperature, post) = best.expect("grid is non-empty");
    Ok(TemperatureFit { temperature, val_ece_pre: pre, val_ece_post: post, grid })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::RngStream;

    /// Two-class logits whose ECE at T = 1 is zero: confidence 0.8 with 8/10
    /// correct and confidence 0.6 with 3/5 correct.
    pub(crate) fn calibrated_logits() -> (Matrix, Vec<usize>) {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (logit, n, hits) in [(4f64.ln(), 10, 8), (1.5f64.ln(), 5, 3)] {
            for i in 0..n {
                rows.push(vec![logit, 0.0]);
                labels.push(if i < hits { 0 } else { 1 });
            }
        }
        (Matrix::from_rows(&rows).unwrap(), labels)
    }

    #[test]
    fn grid_points() {
        let pts = TemperatureGrid::default().points();
        assert_eq!(pts.len(), 100);
        assert_eq!(pts[0], 0.1);
        assert_eq!(pts[9], 1.0);
        assert_eq!(pts[19], 2.0);
        assert_eq!(pts[99], 10.0);
    }

    #[test]
    fn calibrated_logits_fit_identity() {
        let (logits, labels) = calibrated_logits();
        let fit = fit_temperature(&logits, &labels, 15).unwrap();
        assert_eq!(fit.temperature, 1.0);
        assert!(fit.val_ece_post <= fit.val_ece_pre);
    }

    #[test]
    fn doubled_logits_fit_two() {
        let (logits, labels) = calibrated_logits();
        let doubled = Matrix::from_vec(logits.rows(), 2, logits.data().iter().map(|v| 2.0 * v).collect()).unwrap();
        let fit = fit_temperature(&doubled, &labels, 15).unwrap();
        assert!((fit.temperature - 2.0).abs() <= 0.1 + 1e-12, "{}", fit.temperature);
        assert!(fit.val_ece_post <= fit.val_ece_pre);
    }

    #[test]
    fn single_sample_is_fine() {
        let logits = Matrix::from_rows(&[vec![1.3, -0.2, 0.4]]).unwrap();
        let fit = fit_temperature(&logits, &[2], 15).unwrap();
        assert!(fit.temperature > 0.0 && fit.temperature <= 10.0);
        assert!(fit.val_ece_post <= fit.val_ece_pre);
    }

    #[test]
    fn empty_set_is_rejected() {
        assert!(fit_temperature(&Matrix::zeros(0, 3), &[], 15).is_err());
    }

    #[test]
    fn temperature_preserves_argmax() {
        let mut rng = RngStream::new(99);
        for _ in 0..1000 {
            let v: Vec<f64> = (0..7).map(|_| 5.0 * rng.normal()).collect();
            let t = rng.uniform_range(0.05, 50.0);
            let p = apply_temperature(&v, t).unwrap();
            assert_eq!(p.argmax(), crate::numkit::argmax(&v));
        }
        assert!(apply_temperature(&[1.0, 2.0], 0.0).is_err());
        let flat = apply_temperature(&[3.0, -1.0, 0.5], 1e6).unwrap();
        assert!(flat.iter().all(|p| (p - 1.0 / 3.0).abs() < 1e-5));
    }

    #[test]
    fn fit_is_deterministic() {
        let mut rng = RngStream::new(4);
        let rows: Vec<Vec<f64>> = (0..200).map(|_| (0..4).map(|_| 3.0 * rng.normal()).collect()).collect();
        let labels: Vec<usize> = (0..200).map(|_| rng.categorical(&[0.25; 4])).collect();
        let m = Matrix::from_rows(&rows).unwrap();
        assert_eq!(fit_temperature(&m, &labels, 15).unwrap(), fit_temperature(&m, &labels, 15).unwrap());
    }
}
