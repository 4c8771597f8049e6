//! Numeric primitives shared by every other module.
//!
//! Everything is `f64` and row-major. The random stream is a ChaCha8 generator
//! seeded from a `u64`; its full state (seed, stream id, word position) can be
//! captured and restored, which is what checkpoints rely on.

use std::ops::Deref;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major matrix of finite `f64` values.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::domain(
                "Matrix::from_vec",
                format!("expected {} values for a {rows}x{cols} matrix, got {}", rows * cols, data.len()),
            ));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::domain(
                "Matrix::from_vec",
                format!("non-finite entry at ({}, {})", pos / cols.max(1), pos % cols.max(1)),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().position(|r| r.len() != cols) {
            return Err(Error::domain("Matrix::from_rows", format!("row {bad} has a different length")));
        }
        Matrix::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub(crate) fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: f64) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::domain("Matrix::set", "value must be finite"));
        }
        self.data[r * self.cols + c] = value;
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Rows `indices` in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix { rows: indices.len(), cols: self.cols, data }
    }
}

/// A point on the probability simplex.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    /// Absolute tolerance on `|Σp − 1|`.
    pub const SUM_TOLERANCE: f64 = 1e-9;

    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::domain("ProbVector::new", "empty probability vector"));
        }
        if let Some(i) = probs.iter().position(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::domain("ProbVector::new", format!("entry {i} = {} outside [0, 1]", probs[i])));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > Self::SUM_TOLERANCE {
            return Err(Error::domain("ProbVector::new", format!("entries sum to {sum}, not 1")));
        }
        Ok(ProbVector(probs))
    }

    pub fn uniform(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::domain("ProbVector::uniform", "need at least one class"));
        }
        Ok(ProbVector(vec![1.0 / k as f64; k]))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// Index of the largest entry; the first one wins on ties.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    /// The predicted-class probability `max_i p_i`.
    pub fn confidence(&self) -> f64 {
        self.0[self.argmax()]
    }
}

impl Deref for ProbVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// One-hot encoded class label.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVector {
    onehot: Vec<f64>,
    class_index: usize,
}

impl LabelVector {
    pub fn class_index(&self) -> usize {
        self.class_index
    }

    pub fn onehot(&self) -> &[f64] {
        &self.onehot
    }

    pub fn num_classes(&self) -> usize {
        self.onehot.len()
    }
}

pub fn one_hot(class_index: usize, num_classes: usize) -> Result<LabelVector> {
    if class_index >= num_classes {
        return Err(Error::domain(
            "one_hot",
            format!("class index {class_index} out of range for {num_classes} classes"),
        ));
    }
    let mut onehot = vec![0.0; num_classes];
    onehot[class_index] = 1.0;
    Ok(LabelVector { onehot, class_index })
}

/// First index of the maximum value.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// `ln Σ exp(v_i)` with the max-shift.
pub fn log_sum_exp(v: &[f64]) -> Result<f64> {
    if v.is_empty() {
        return Err(Error::domain("log_sum_exp", "empty input"));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::domain("log_sum_exp", "non-finite input"));
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = v.iter().map(|x| (x - max).exp()).sum();
    Ok(max + sum.ln())
}

/// Temperature softmax `exp(v_i / T) / Σ exp(v_k / T)`.
///
/// The logits are divided by `T` first, so `softmax(v, T)` and
/// `softmax(v / T, 1)` go through the same arithmetic.
pub fn softmax(logits: &[f64], temperature: f64) -> Result<ProbVector> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::domain("softmax", format!("temperature must be > 0, got {temperature}")));
    }
    if logits.len() < 2 {
        return Err(Error::domain("softmax", "need at least two logits"));
    }
    let scaled: Vec<f64> = logits.iter().map(|z| z / temperature).collect();
    if scaled.iter().any(|x| !x.is_finite()) {
        return Err(Error::domain("softmax", "non-finite logits"));
    }
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(ProbVector(exps.into_iter().map(|e| e / sum).collect()))
}

/// Captured generator state; restoring it resumes the exact draw sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngSnapshot {
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u128,
}

/// Seeded ChaCha8 stream. Single owner; clone it to branch a copy.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        RngStream { seed, inner: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// An independent stream with the same seed and a different ChaCha stream id.
    pub fn fork(&self, stream: u64) -> RngStream {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(stream);
        RngStream { seed: self.seed, inner }
    }

    pub fn snapshot(&self) -> RngSnapshot {
        RngSnapshot {
            seed: self.seed,
            stream: self.inner.get_stream(),
            word_pos: self.inner.get_word_pos(),
        }
    }

    pub fn restore(snapshot: RngSnapshot) -> RngStream {
        let mut inner = ChaCha8Rng::seed_from_u64(snapshot.seed);
        inner.set_stream(snapshot.stream);
        inner.set_word_pos(snapshot.word_pos);
        RngStream { seed: snapshot.seed, inner }
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn standard_normal(&mut self, n: usize) -> Result<Vec<f64>> {
        if n == 0 {
            return Err(Error::domain("rng_standard_normal", "n must be at least 1"));
        }
        Ok((0..n).map(|_| self.normal()).collect())
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }

    /// Index drawn from the categorical distribution `probs`.
    pub fn categorical(&mut self, probs: &[f64]) -> usize {
        let u = self.uniform();
        let mut acc = 0.0;
        for (k, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return k;
            }
        }
        // u landed in the rounding gap above the cumulative sum
        probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
    }
}

/// Feature rows with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    features: Matrix,
    labels: Vec<usize>,
    num_classes: usize,
}

impl LabeledBatch {
    pub fn new(features: Matrix, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::domain(
                "LabeledBatch::new",
                format!("{} feature rows but {} labels", features.rows(), labels.len()),
            ));
        }
        if let Some(bad) = labels.iter().position(|&l| l >= num_classes) {
            return Err(Error::domain(
                "LabeledBatch::new",
                format!("label {} at row {bad} out of range for {num_classes} classes", labels[bad]),
            ));
        }
        Ok(LabeledBatch { features, labels, num_classes })
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn input_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledBatch {
        LabeledBatch {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// Splits off the last `holdout` rows of a seeded permutation.
    pub fn split_holdout(&self, holdout: usize, rng: &mut RngStream) -> Result<(LabeledBatch, LabeledBatch)> {
        if holdout == 0 || holdout >= self.len() {
            return Err(Error::domain(
                "LabeledBatch::split_holdout",
                format!("holdout {holdout} must be in [1, {})", self.len()),
            ));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        rng.shuffle(&mut order);
        let (keep, held) = order.split_at(self.len() - holdout);
        Ok((self.subset(keep), self.subset(held)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn log_sum_exp_examples() {
        assert!((log_sum_exp(&[0.0, 0.0]).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!((log_sum_exp(&[1000.0, 1000.0]).unwrap() - (1000.0 + 2f64.ln())).abs() < 1e-12);
        assert_eq!(log_sum_exp(&[3.0]).unwrap(), 3.0);
        assert!(log_sum_exp(&[]).is_err());
    }

    #[test]
    fn softmax_examples() {
        let p = softmax(&[0.0; 4], 1.0).unwrap();
        assert!(p.iter().all(|&x| (x - 0.25).abs() < 1e-15));

        let p = softmax(&[2f64.ln(), 0.0], 1.0).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-15);

        // near-uniform at large T; the first entry sits 1.0007e-3 above 1/3
        let p = softmax(&[5.0, 1.0, 0.0], 1000.0).unwrap();
        let z: f64 = [0.005f64, 0.001, 0.0].iter().map(|v| v.exp()).sum();
        assert!((p[0] - 0.005f64.exp() / z).abs() < 1e-15);
        assert!(p.iter().all(|&x| (x - 1.0 / 3.0).abs() < 1.01e-3));

        assert!(softmax(&[1.0, 2.0], 0.0).is_err());
        assert!(softmax(&[1.0, 2.0], -1.0).is_err());
        assert!(softmax(&[1.0], 1.0).is_err());
    }

    #[test]
    fn softmax_survives_huge_logits() {
        let p = softmax(&[1e300, 0.0], 1.0).unwrap();
        assert_eq!(p.as_slice(), &[1.0, 0.0]);
    }

    #[test]
    fn one_hot_examples() {
        assert_eq!(one_hot(0, 3).unwrap().onehot(), &[1.0, 0.0, 0.0]);
        let l = one_hot(2, 3).unwrap();
        assert_eq!(l.onehot(), &[0.0, 0.0, 1.0]);
        assert_eq!(l.class_index(), 2);
        assert!(one_hot(5, 3).is_err());
    }

    #[test]
    fn normal_stream_is_deterministic() {
        let a = RngStream::new(42).standard_normal(10).unwrap();
        let b = RngStream::new(42).standard_normal(10).unwrap();
        let a_bits: Vec<u64> = a.iter().map(|x| x.to_bits()).collect();
        let b_bits: Vec<u64> = b.iter().map(|x| x.to_bits()).collect();
        assert_eq!(a_bits, b_bits);
        assert!(RngStream::new(1).standard_normal(0).is_err());
    }

    #[test]
    fn normal_moments_over_a_million_draws() {
        let draws = RngStream::new(7).standard_normal(1_000_000).unwrap();
        let n = draws.len() as f64;
        let mean = draws.iter().sum::<f64>() / n;
        let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() <= 0.01, "mean {mean}");
        assert!((var - 1.0).abs() <= 0.02, "variance {var}");
    }

    #[test]
    fn snapshot_resumes_the_sequence() {
        let mut rng = RngStream::new(3).fork(9);
        rng.standard_normal(17).unwrap();
        let snap = rng.snapshot();
        let expected = rng.standard_normal(5).unwrap();
        let resumed = RngStream::restore(snap).standard_normal(5).unwrap();
        assert_eq!(expected, resumed);
    }

    #[test]
    fn forks_differ() {
        let root = RngStream::new(3);
        let a = root.fork(1).standard_normal(4).unwrap();
        let b = root.fork(2).standard_normal(4).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn matrix_rejects_bad_input() {
        assert!(Matrix::from_vec(2, 2, vec![1.0; 3]).is_err());
        assert!(Matrix::from_vec(1, 2, vec![1.0, f64::NAN]).is_err());
        assert!(Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0]]).is_err());
    }

    #[test]
    fn prob_vector_validation() {
        assert!(ProbVector::new(vec![0.5, 0.5]).is_ok());
        assert!(ProbVector::new(vec![0.5, 0.6]).is_err());
        assert!(ProbVector::new(vec![1.5, -0.5]).is_err());
        assert!(ProbVector::new(vec![]).is_err());
    }

    fn logits_strategy() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-50.0f64..50.0, 2..12)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]

        #[test]
        fn softmax_stays_on_simplex(v in logits_strategy(), t in 0.01f64..100.0) {
            let p = softmax(&v, t).unwrap();
            prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= ProbVector::SUM_TOLERANCE);
            prop_assert_eq!(p.argmax(), argmax(&v));
        }
    }

    proptest! {
        #[test]
        fn softmax_temperature_is_logit_division(v in logits_strategy(), t in 0.05f64..20.0) {
            let direct = softmax(&v, t).unwrap();
            let divided: Vec<f64> = v.iter().map(|x| x / t).collect();
            let unit = softmax(&divided, 1.0).unwrap();
            for (a, b) in direct.iter().zip(unit.iter()) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn softmax_is_shift_invariant(v in logits_strategy(), c in -100.0f64..100.0, t in 0.1f64..10.0) {
            let base = softmax(&v, t).unwrap();
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let moved = softmax(&shifted, t).unwrap();
            for (a, b) in base.iter().zip(moved.iter()) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn log_sum_exp_bounds(v in prop::collection::vec(-700.0f64..700.0, 1..20)) {
            let lse = log_sum_exp(&v).unwrap();
            let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(lse >= max);
            prop_assert!(lse <= max + (v.len() as f64).ln() + 1e-12);
        }
    }
}
