//! Training losses and their exact gradients with respect to the logits.
//!
//! Every focal-style loss in this module is cross entropy times a per-sample
//! uncertainty weight `u(p̂, y)`. The weight can be placed in two ways:
//!
//! * [`Placement::Loss`]: the loss is `u · CE` and backpropagation
//!   differentiates through `u` as well (product rule). Focal loss, dual
//!   focal loss and BSCE work this way.
//! * [`Placement::Gradient`]: `u` is computed in the forward pass and
//!   detached, so the logit gradient is exactly `u · (p̂ − y)`. This is the
//!   gradient-weighted family; with the gBS weight it is BSCE-GRA.
//!
//! All gradients are taken with respect to the pre-softmax logits `ĝ`, with
//! `p̂ = softmax(ĝ)`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{LabelVector, ProbVector};

/// Floor applied to the true-class probability before taking its log.
pub const LOG_EPS: f64 = 1e-12;

/// Default gBS exponent for BSCE / BSCE-GRA.
pub const DEFAULT_GBS_GAMMA: f64 = 4.0;
/// Default gBS norm order for BSCE / BSCE-GRA.
pub const DEFAULT_GBS_BETA: f64 = 2.0;
/// Dual focal loss exponent.
pub const DEFAULT_DFL_GAMMA: f64 = 5.0;
/// Fixed-γ focal loss exponent.
pub const DEFAULT_FOCAL_GAMMA: f64 = 3.0;

/// Threshold of the FLSD-53 schedule on the true-class probability.
pub const FLSD_THRESHOLD: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum LossKind {
    Ce,
    BrierLoss,
    Focal,
    FocalFlsd53,
    DualFocal,
    Bsce,
    BsceGra,
    FocalGra,
    FocalFlsd53Gra,
    DualFocalGra,
}

impl LossKind {
    pub const ALL: [LossKind; 10] = [
        LossKind::Ce,
        LossKind::BrierLoss,
        LossKind::Focal,
        LossKind::FocalFlsd53,
        LossKind::DualFocal,
        LossKind::Bsce,
        LossKind::BsceGra,
        LossKind::FocalGra,
        LossKind::FocalFlsd53Gra,
        LossKind::DualFocalGra,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Ce => "ce",
            LossKind::BrierLoss => "brier",
            LossKind::Focal => "focal",
            LossKind::FocalFlsd53 => "flsd-53",
            LossKind::DualFocal => "dual-focal",
            LossKind::Bsce => "bsce",
            LossKind::BsceGra => "bsce-gra",
            LossKind::FocalGra => "focal-gra",
            LossKind::FocalFlsd53Gra => "flsd-53-gra",
            LossKind::DualFocalGra => "dual-focal-gra",
        }
    }

    pub fn supported_names() -> String {
        LossKind::ALL.iter().map(|k| k.name()).collect::<Vec<_>>().join(", ")
    }

    /// Whether the uncertainty weight is detached onto the gradient.
    pub fn is_gradient_weighted(self) -> bool {
        matches!(self, LossKind::BsceGra | LossKind::FocalGra | LossKind::FocalFlsd53Gra | LossKind::DualFocalGra)
    }

    /// Whether `beta` is read by this loss.
    pub fn uses_beta(self) -> bool {
        matches!(self, LossKind::Bsce | LossKind::BsceGra)
    }

    /// Whether `gamma` is read by this loss.
    pub fn uses_gamma(self) -> bool {
        !matches!(self, LossKind::Ce | LossKind::BrierLoss | LossKind::FocalFlsd53 | LossKind::FocalFlsd53Gra)
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let wanted = s.trim().to_ascii_lowercase().replace('_', "-");
        LossKind::ALL.iter().copied().find(|k| k.name() == wanted).ok_or_else(|| {
            Error::domain(
                "LossKind",
                format!("unknown loss \"{s}\"; supported losses: {}", LossKind::supported_names()),
            )
        })
    }
}

impl TryFrom<String> for LossKind {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<LossKind> for String {
    fn from(k: LossKind) -> String {
        k.name().to_string()
    }
}

/// A loss together with its hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub kind: LossKind,
    /// Exponent γ.
    pub gamma: f64,
    /// Norm order β (gBS losses only).
    pub beta: f64,
}

impl LossSpec {
    pub fn new(kind: LossKind, gamma: f64, beta: f64) -> Result<Self> {
        if !(gamma >= 0.0) || !gamma.is_finite() {
            return Err(Error::domain("LossSpec", format!("gamma must be ≥ 0, got {gamma}")));
        }
        if !(beta >= 1.0) || !beta.is_finite() {
            return Err(Error::domain("LossSpec", format!("beta must be ≥ 1, got {beta}")));
        }
        Ok(LossSpec { kind, gamma, beta })
    }

    /// `kind` with its customary hyperparameters.
    pub fn with_defaults(kind: LossKind) -> Self {
        let gamma = match kind {
            LossKind::Bsce | LossKind::BsceGra => DEFAULT_GBS_GAMMA,
            LossKind::DualFocal | LossKind::DualFocalGra => DEFAULT_DFL_GAMMA,
            LossKind::Focal | LossKind::FocalGra => DEFAULT_FOCAL_GAMMA,
            _ => 0.0,
        };
        LossSpec { kind, gamma, beta: DEFAULT_GBS_BETA }
    }

    pub fn ce() -> Self {
        LossSpec::with_defaults(LossKind::Ce)
    }

    pub fn bsce_gra(gamma: f64, beta: f64) -> Result<Self> {
        LossSpec::new(LossKind::BsceGra, gamma, beta)
    }

    /// The uncertainty weight this loss applies, if any.
    pub fn weight(&self) -> Option<UncertaintyWeight> {
        match self.kind {
            LossKind::Ce | LossKind::BrierLoss => None,
            LossKind::Focal | LossKind::FocalGra => Some(UncertaintyWeight::Focal { gamma: self.gamma }),
            LossKind::FocalFlsd53 | LossKind::FocalFlsd53Gra => Some(UncertaintyWeight::FocalFlsd53),
            LossKind::DualFocal | LossKind::DualFocalGra => Some(UncertaintyWeight::DualFocal { gamma: self.gamma }),
            LossKind::Bsce | LossKind::BsceGra => Some(UncertaintyWeight::Gbs { gamma: self.gamma, beta: self.beta }),
        }
    }

    pub fn evaluate(&self, probs: &ProbVector, label: &LabelVector) -> LossEval {
        match self.kind {
            LossKind::Ce => cross_entropy(probs, label),
            LossKind::BrierLoss => brier_training_loss(probs, label),
            kind => {
                let placement = if kind.is_gradient_weighted() { Placement::Gradient } else { Placement::Loss };
                let weight = self.weight().expect("weighted loss kinds carry a weight");
                weighted_cross_entropy(probs, label, weight, placement)
            }
        }
    }
}

/// Loss value, logit gradient and the weight that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct LossEval {
    pub value: f64,
    /// ∂loss/∂ĝ.
    pub grad_logits: Vec<f64>,
    /// Uncertainty weight `u`; 1 for unweighted losses.
    pub weight: f64,
    /// The true-class probability was below [`LOG_EPS`] and got clamped.
    pub clamped: bool,
}

/// Where the uncertainty weight enters the optimisation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Placement {
    /// `u · CE`, differentiated through `u`.
    Loss,
    /// `u` detached: gradient is `u · ∇CE`.
    Gradient,
}

/// Per-sample uncertainty weights `u(p̂, y)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UncertaintyWeight {
    /// `(1 − p̂_t)^γ`.
    Focal { gamma: f64 },
    /// Focal weight with γ from [`flsd_gamma`].
    FocalFlsd53,
    /// `(1 − p̂_t + p̂_j)^γ`, `p̂_j` the runner-up below the true class.
    DualFocal { gamma: f64 },
    /// `‖p̂ − y‖_β^γ`.
    Gbs { gamma: f64, beta: f64 },
}

impl UncertaintyWeight {
    pub fn value(&self, probs: &ProbVector, label: &LabelVector) -> f64 {
        let t = label.class_index();
        let p_t = probs[t];
        match *self {
            UncertaintyWeight::Focal { gamma } => pow_or_one(1.0 - p_t, gamma),
            UncertaintyWeight::FocalFlsd53 => pow_or_one(1.0 - p_t, flsd_gamma_unchecked(p_t)),
            UncertaintyWeight::DualFocal { gamma } => {
                let j = dual_focal_runner_up(probs, t);
                pow_or_one(1.0 - p_t + probs[j], gamma)
            }
            UncertaintyWeight::Gbs { gamma, beta } => gbs_weight(probs, label, gamma, beta),
        }
    }

    /// ∂u/∂p̂ with the probabilities treated as free coordinates.
    ///
    /// The FLSD-53 γ and the dual-focal runner-up index are piecewise constant
    /// and are held fixed.
    pub fn grad_probs(&self, probs: &ProbVector, label: &LabelVector) -> Vec<f64> {
        let t = label.class_index();
        let p_t = probs[t];
        let mut grad = vec![0.0; probs.len()];
        match *self {
            UncertaintyWeight::Focal { gamma } => grad[t] = -pow_derivative(1.0 - p_t, gamma),
            UncertaintyWeight::FocalFlsd53 => grad[t] = -pow_derivative(1.0 - p_t, flsd_gamma_unchecked(p_t)),
            UncertaintyWeight::DualFocal { gamma } => {
                let j = dual_focal_runner_up(probs, t);
                let d = pow_derivative(1.0 - p_t + probs[j], gamma);
                grad[t] = -d;
                grad[j] += d;
            }
            UncertaintyWeight::Gbs { gamma, beta } => {
                if gamma == 0.0 {
                    return grad;
                }
                let diffs: Vec<f64> = probs.iter().zip(label.onehot()).map(|(p, y)| p - y).collect();
                let s: f64 = diffs.iter().map(|&d| abs_pow(d, beta)).sum();
                if s == 0.0 {
                    return grad;
                }
                // d/dp_i (S^{γ/β}) = γ S^{γ/β − 1} |d_i|^{β−1} sign(d_i)
                let outer = gamma * s.powf(gamma / beta - 1.0);
                for (g, &d) in grad.iter_mut().zip(&diffs) {
                    if d != 0.0 {
                        *g = outer * d.abs().powf(beta - 1.0) * d.signum();
                    }
                }
            }
        }
        grad
    }
}

/// `x^γ`, with `x^0 = 1` for every `x` (including 0).
fn pow_or_one(x: f64, gamma: f64) -> f64 {
    if gamma == 0.0 {
        1.0
    } else {
        x.max(0.0).powf(gamma)
    }
}

/// `d/dx x^γ = γ x^{γ−1}`, taken as 0 at `x = 0`.
fn pow_derivative(x: f64, gamma: f64) -> f64 {
    if gamma == 0.0 || x <= 0.0 {
        0.0
    } else {
        gamma * x.powf(gamma - 1.0)
    }
}

fn abs_pow(d: f64, beta: f64) -> f64 {
    if beta == 2.0 {
        d * d
    } else if beta == 1.0 {
        d.abs()
    } else {
        d.abs().powf(beta)
    }
}

/// Chain rule through softmax: `∂/∂ĝ_k = p_k (v_k − Σ_i p_i v_i)`.
pub fn softmax_backward(probs: &[f64], grad_probs: &[f64]) -> Vec<f64> {
    let dot: f64 = probs.iter().zip(grad_probs).map(|(p, v)| p * v).sum();
    probs.iter().zip(grad_probs).map(|(p, v)| p * (v - dot)).collect()
}

fn ce_parts(probs: &ProbVector, label: &LabelVector) -> (f64, Vec<f64>, bool) {
    assert_eq!(probs.len(), label.num_classes(), "probability and label lengths differ");
    let p_t = probs[label.class_index()];
    let clamped = p_t < LOG_EPS;
    let value = -p_t.max(LOG_EPS).ln();
    let grad = probs.iter().zip(label.onehot()).map(|(p, y)| p - y).collect();
    (value, grad, clamped)
}

pub fn cross_entropy(probs: &ProbVector, label: &LabelVector) -> LossEval {
    let (value, grad_logits, clamped) = ce_parts(probs, label);
    LossEval { value, grad_logits, weight: 1.0, clamped }
}

/// `Σ_i (p̂_i − y_i)²` as a training loss.
pub fn brier_training_loss(probs: &ProbVector, label: &LabelVector) -> LossEval {
    assert_eq!(probs.len(), label.num_classes(), "probability and label lengths differ");
    let diffs: Vec<f64> = probs.iter().zip(label.onehot()).map(|(p, y)| p - y).collect();
    let value = diffs.iter().map(|d| d * d).sum();
    let grad_probs: Vec<f64> = diffs.iter().map(|d| 2.0 * d).collect();
    LossEval { value, grad_logits: softmax_backward(probs, &grad_probs), weight: 1.0, clamped: false }
}

/// Cross entropy scaled by an uncertainty weight placed on the loss or on the gradient.
pub fn weighted_cross_entropy(
    probs: &ProbVector,
    label: &LabelVector,
    weight: UncertaintyWeight,
    placement: Placement,
) -> LossEval {
    let (ce, ce_grad, clamped) = ce_parts(probs, label);
    let u = weight.value(probs, label);
    let mut grad_logits: Vec<f64> = ce_grad.iter().map(|g| u * g).collect();
    if placement == Placement::Loss && ce > 0.0 {
        let du = softmax_backward(probs, &weight.grad_probs(probs, label));
        for (g, d) in grad_logits.iter_mut().zip(du) {
            *g += ce * d;
        }
    }
    LossEval { value: u * ce, grad_logits, weight: u, clamped }
}

/// `−(1 − p̂_t)^γ ln p̂_t`.
pub fn focal_loss(probs: &ProbVector, label: &LabelVector, gamma: f64) -> LossEval {
    weighted_cross_entropy(probs, label, UncertaintyWeight::Focal { gamma }, Placement::Loss)
}

/// Focal loss with the FLSD-53 sample-dependent γ.
pub fn focal_loss_flsd53(probs: &ProbVector, label: &LabelVector) -> LossEval {
    weighted_cross_entropy(probs, label, UncertaintyWeight::FocalFlsd53, Placement::Loss)
}

/// FLSD-53 schedule: γ = 5 on `[0, 0.2)`, γ = 3 on `[0.2, 1]`.
pub fn flsd_gamma(p_true: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p_true) {
        return Err(Error::domain("flsd_gamma", format!("probability {p_true} outside [0, 1]")));
    }
    Ok(flsd_gamma_unchecked(p_true))
}

fn flsd_gamma_unchecked(p_true: f64) -> f64 {
    if p_true < FLSD_THRESHOLD {
        5.0
    } else {
        3.0
    }
}

/// Index `j` of the dual-focal runner-up: the largest non-true probability
/// strictly below `p̂_t`, or the largest non-true probability when none is
/// below. First index wins ties.
pub fn dual_focal_runner_up(probs: &[f64], true_class: usize) -> usize {
    assert!(probs.len() >= 2, "dual focal loss needs at least two classes");
    let p_t = probs[true_class];
    let best = |admit: &dyn Fn(f64) -> bool| {
        let mut best: Option<usize> = None;
        for (i, &p) in probs.iter().enumerate() {
            if i != true_class && admit(p) && best.is_none_or(|b| p > probs[b]) {
                best = Some(i);
            }
        }
        best
    };
    best(&|p| p < p_t).or_else(|| best(&|_| true)).expect("at least one non-true class")
}

/// `−(1 − p̂_t + p̂_j)^γ ln p̂_t`.
pub fn dual_focal_loss(probs: &ProbVector, label: &LabelVector, gamma: f64) -> LossEval {
    weighted_cross_entropy(probs, label, UncertaintyWeight::DualFocal { gamma }, Placement::Loss)
}

/// Generalized Brier Score `‖p̂ − y‖_β^γ = (Σ_i |p̂_i − y_i|^β)^{γ/β}`.
///
/// At `γ = β = 2` this is the Brier Score, computed with the same arithmetic
/// as [`crate::metrics::brier_score`].
pub fn gbs_weight(probs: &ProbVector, label: &LabelVector, gamma: f64, beta: f64) -> f64 {
    assert_eq!(probs.len(), label.num_classes(), "probability and label lengths differ");
    let s: f64 = probs.iter().zip(label.onehot()).map(|(p, y)| abs_pow(p - y, beta)).sum();
    norm_pow(s, gamma, beta)
}

/// gBS restricted to the listed class indices.
///
/// With `β = 1`, restricting to the true class gives the focal weight and
/// restricting to the true class plus the runner-up gives the dual focal weight.
pub fn gbs_weight_over(probs: &ProbVector, label: &LabelVector, gamma: f64, beta: f64, classes: &[usize]) -> f64 {
    let y = label.onehot();
    let s: f64 = classes.iter().map(|&i| abs_pow(probs[i] - y[i], beta)).sum();
    norm_pow(s, gamma, beta)
}

fn norm_pow(s: f64, gamma: f64, beta: f64) -> f64 {
    let e = gamma / beta;
    if gamma == 0.0 {
        1.0
    } else if e == 1.0 {
        s
    } else {
        s.powf(e)
    }
}

/// gBS-weighted cross entropy with the weight differentiated (BSCE).
pub fn bsce(probs: &ProbVector, label: &LabelVector, gamma: f64, beta: f64) -> LossEval {
    weighted_cross_entropy(probs, label, UncertaintyWeight::Gbs { gamma, beta }, Placement::Loss)
}

/// gBS-weighted cross entropy with the weight detached (BSCE-GRA).
///
/// `value` is the weighted CE, kept for logging; the optimisation is defined
/// by `grad_logits = u · (p̂ − y)`.
pub fn bsce_gra(probs: &ProbVector, label: &LabelVector, gamma: f64, beta: f64) -> LossEval {
    weighted_cross_entropy(probs, label, UncertaintyWeight::Gbs { gamma, beta }, Placement::Gradient)
}

/// Factor `g(p, γ) = (1 − p)^γ − γ p (1 − p)^{γ−1} ln p` with `∇FL = g(p̂_t, γ) ∇CE`.
pub fn focal_grad_factor(p: f64, gamma: f64) -> Result<f64> {
    if !(p > 0.0) || p > 1.0 {
        return Err(Error::domain("focal_grad_factor", format!("p = {p} outside (0, 1]")));
    }
    if !(gamma >= 0.0) {
        return Err(Error::domain("focal_grad_factor", format!("gamma must be ≥ 0, got {gamma}")));
    }
    let q = 1.0 - p;
    Ok(pow_or_one(q, gamma) - p * pow_derivative(q, gamma) * p.ln())
}
