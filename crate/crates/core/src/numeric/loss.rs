//! Loss functions shared by every training stage.
//!
//! All losses that touch a logarithm clamp probabilities at `PROB_FLOOR`
//! first: the service may return exact zeros after truncation and the
//! losses are undefined at 0.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Tensor;

/// Probability floor applied before any `log`.
pub const PROB_FLOOR: f64 = 1e-12;

/// Tolerance for simplex validation on loss inputs.
pub const SIMPLEX_TOL: f64 = 1e-6;

/// Numerically stable softmax over a slice (max-shifted).
pub(crate) fn softmax_slice(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

/// `-log(softmax(logits)[label])`, the kernel shared by cross-entropy and
/// focal loss.
pub(crate) fn neg_log_softmax_at(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_sum: f64 = logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    -(logits[label] - max - log_sum)
}

/// Softmax of a logit vector. Entries land in (0, 1) and sum to 1.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    logits.check_finite("softmax input")?;
    if logits.numel() < 2 {
        return Err(Error::InvalidInput("softmax needs K >= 2".into()));
    }
    Ok(Tensor::from_vec(softmax_slice(logits.data())))
}

/// Cross-entropy of a logit vector against a class index:
/// `-log(softmax(logits)[label])`.
pub fn cross_entropy(logits: &Tensor, label: usize) -> Result<f64> {
    logits.check_finite("cross_entropy logits")?;
    if label >= logits.numel() {
        return Err(Error::Index(format!(
            "label {label} for {} classes",
            logits.numel()
        )));
    }
    Ok(neg_log_softmax_at(logits.data(), label))
}

/// Gradient of `cross_entropy` with respect to the logits: `p(z) - y`.
pub fn cross_entropy_grad(logits: &Tensor, label: usize) -> Result<Tensor> {
    logits.check_finite("cross_entropy logits")?;
    if label >= logits.numel() {
        return Err(Error::Index(format!(
            "label {label} for {} classes",
            logits.numel()
        )));
    }
    let mut p = softmax_slice(logits.data());
    p[label] -= 1.0;
    Ok(Tensor::from_vec(p))
}

/// Shannon entropy of a probability vector (floored logs).
pub fn entropy(p: &Tensor) -> Result<f64> {
    p.check_simplex(SIMPLEX_TOL, "entropy input")?;
    Ok(p.data()
        .iter()
        .map(|&q| {
            let q = q.max(PROB_FLOOR);
            -q * q.ln()
        })
        .sum())
}

/// Priming loss `-sum_j p_service[j] * log(p_local[j])`, the target-weighted
/// negative log-likelihood. Equals `H(p_service) + KL(p_service || p_local)`,
/// so over `p_local` it is minimized exactly at `p_local = p_service`.
pub fn priming_loss(p_local: &Tensor, p_service: &Tensor) -> Result<f64> {
    p_local.check_simplex(SIMPLEX_TOL, "priming_loss p_local")?;
    p_service.check_simplex(SIMPLEX_TOL, "priming_loss p_service")?;
    if p_local.numel() != p_service.numel() {
        return Err(Error::InvalidInput("priming_loss width mismatch".into()));
    }
    Ok(p_service
        .data()
        .iter()
        .zip(p_local.data())
        .map(|(&s, &l)| -s * l.max(PROB_FLOOR).ln())
        .sum())
}

/// Priming-loss variants used by the loss ablation. Probability kinds take
/// distributions, logit kinds take raw logits; `Kl` dispatches to
/// [`priming_loss`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrimingLossKind {
    Kl,
    L1Prob,
    L2Prob,
    L1Logit,
    L2Logit,
}

impl PrimingLossKind {
    /// True for kinds that need raw service logits (debug access).
    pub fn needs_logits(self) -> bool {
        matches!(self, PrimingLossKind::L1Logit | PrimingLossKind::L2Logit)
    }
}

/// Dispatch over [`PrimingLossKind`]. `local` and `service` are
/// probabilities for the prob kinds, logits for the logit kinds.
pub fn alt_priming_loss(kind: PrimingLossKind, local: &Tensor, service: &Tensor) -> Result<f64> {
    if local.numel() != service.numel() {
        return Err(Error::InvalidInput("alt_priming_loss width mismatch".into()));
    }
    local.check_finite("alt_priming_loss local")?;
    service.check_finite("alt_priming_loss service")?;
    let l1 = || -> f64 {
        local
            .data()
            .iter()
            .zip(service.data())
            .map(|(a, b)| (a - b).abs())
            .sum()
    };
    let l2 = || -> f64 {
        local
            .data()
            .iter()
            .zip(service.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    };
    match kind {
        PrimingLossKind::Kl => priming_loss(local, service),
        PrimingLossKind::L1Prob | PrimingLossKind::L1Logit => Ok(l1()),
        PrimingLossKind::L2Prob | PrimingLossKind::L2Logit => Ok(l2()),
    }
}

/// Focal loss `(1 - p_label)^gamma * (-log p_label)`. With `gamma = 0` the
/// modulating factor is exactly 1 so the value equals [`cross_entropy`]
/// bit for bit (shared kernel).
pub fn focal_loss(logits: &Tensor, label: usize, gamma: f64) -> Result<f64> {
    if gamma < 0.0 {
        return Err(Error::InvalidInput("focal gamma must be >= 0".into()));
    }
    let ce = cross_entropy(logits, label)?;
    let p = softmax_slice(logits.data())[label];
    Ok((1.0 - p).max(0.0).powf(gamma) * ce)
}
