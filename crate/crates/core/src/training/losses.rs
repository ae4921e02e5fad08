//! Cross-entropy, divergences, the combined regularized loss and the two
//! reweighting baselines, each as plain numbers and as tape expressions.
//!
//! Natural logarithm throughout; probabilities inside a log are floored at
//! [`LOG_FLOOR`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{softmax, Tape, Tensor, TensorError, Var};

pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("not a probability vector: sum {sum}")]
    NotDistribution { sum: f64 },
    #[error("distributions have lengths {0} and {1}")]
    LengthMismatch(usize, usize),
    #[error("label {label} outside {num_labels} labels")]
    InvalidLabel { label: usize, num_labels: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

fn check_distribution(p: &[f64]) -> Result<(), LossError> {
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-6 || p.iter().any(|v| !(*v >= 0.0)) {
        return Err(LossError::NotDistribution { sum });
    }
    Ok(())
}

fn check_pair(p: &[f64], q: &[f64]) -> Result<(), LossError> {
    if p.len() != q.len() {
        return Err(LossError::LengthMismatch(p.len(), q.len()));
    }
    check_distribution(p)?;
    check_distribution(q)
}

fn check_label(y: usize, k: usize) -> Result<(), LossError> {
    if y >= k {
        return Err(LossError::InvalidLabel {
            label: y,
            num_labels: k,
        });
    }
    Ok(())
}

fn kld_unchecked(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(pk, _)| **pk > 0.0)
        .map(|(pk, qk)| pk * (pk / qk.max(LOG_FLOOR)).ln())
        .sum()
}

/// `Σ p(k) ln(p(k)/q(k))`, with `0·ln(0/·) = 0`.
pub fn kld(p: &[f64], q: &[f64]) -> Result<f64, LossError> {
    check_pair(p, q)?;
    Ok(kld_unchecked(p, q))
}

/// Jensen–Shannon divergence, in `[0, ln 2]`.
pub fn jsd(p: &[f64], q: &[f64]) -> Result<f64, LossError> {
    check_pair(p, q)?;
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    let v = 0.5 * (kld_unchecked(p, &m) + kld_unchecked(q, &m));
    Ok(v.clamp(0.0, std::f64::consts::LN_2))
}

pub fn cross_entropy(logits: &[f64], y: usize) -> Result<f64, LossError> {
    check_label(y, logits.len())?;
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    Ok(lse - logits[y])
}

/// `CE(orig, y) + λ·JSD(softmax(unbias), softmax(orig))`.
pub fn combined_loss(logits_orig: &[f64], logits_unbias: &[f64], y: usize, lambda: f64) -> Result<f64, LossError> {
    let ce = cross_entropy(logits_orig, y)?;
    if lambda == 0.0 {
        return Ok(ce);
    }
    Ok(ce + lambda * jsd(&softmax(logits_unbias), &softmax(logits_orig))?)
}

/// Example reweighting: `−(1 − p_bias[y]) · ln p_debias[y]`.
pub fn er_loss(p_bias: &[f64], p_debias: &[f64], y: usize) -> Result<f64, LossError> {
    check_pair(p_bias, p_debias)?;
    check_label(y, p_bias.len())?;
    Ok(-(1.0 - p_bias[y]) * p_debias[y].max(LOG_FLOOR).ln())
}

/// How the two experts are combined before the final softmax.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoeForm {
    /// `log p_bias + log p_debias`.
    #[default]
    LogSpace,
    /// `p_bias + p_debias`, probabilities summed directly.
    ProbabilitySum,
}

/// Product of experts: `−ln softmax(log p_bias + log p_debias)[y]`.
pub fn poe_loss(logits_bias: &[f64], logits_debias: &[f64], y: usize, form: PoeForm) -> Result<f64, LossError> {
    if logits_bias.len() != logits_debias.len() {
        return Err(LossError::LengthMismatch(logits_bias.len(), logits_debias.len()));
    }
    check_label(y, logits_bias.len())?;
    let (pb, pd) = (softmax(logits_bias), softmax(logits_debias));
    let combined: Vec<f64> = match form {
        PoeForm::LogSpace => pb
            .iter()
            .zip(&pd)
            .map(|(a, b)| a.max(LOG_FLOOR).ln() + b.max(LOG_FLOOR).ln())
            .collect(),
        PoeForm::ProbabilitySum => pb.iter().zip(&pd).map(|(a, b)| a + b).collect(),
    };
    cross_entropy(&combined, y)
}

// Tape expressions ---------------------------------------------------------

pub fn cross_entropy_var(tape: &mut Tape, logits: Var, y: usize) -> Result<Var, LossError> {
    check_label(y, tape.value(logits).len())?;
    let lp = tape.log_softmax_rows(logits)?;
    let picked = tape.pick(lp, y)?;
    Ok(tape.scale(picked, -1.0)?)
}

pub fn kld_var(tape: &mut Tape, p: Var, q: Var) -> Result<Var, LossError> {
    let lp = tape.log_floor(p, LOG_FLOOR)?;
    let lq = tape.log_floor(q, LOG_FLOOR)?;
    let diff = tape.sub(lp, lq)?;
    let terms = tape.mul(p, diff)?;
    Ok(tape.sum(terms)?)
}

pub fn jsd_var(tape: &mut Tape, p: Var, q: Var) -> Result<Var, LossError> {
    let s = tape.add(p, q)?;
    let m = tape.scale(s, 0.5)?;
    let a = kld_var(tape, p, m)?;
    let b = kld_var(tape, q, m)?;
    let ab = tape.add(a, b)?;
    Ok(tape.scale(ab, 0.5)?)
}

#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub ce: f64,
    pub jsd: f64,
}

/// Regularized loss on the tape. `logits_unbias = None` stands for an
/// unmasked draw: the two distributions coincide and the JSD term is zero.
/// Gradients flow through both forward passes.
pub fn combined_loss_var(
    tape: &mut Tape,
    logits_orig: Var,
    logits_unbias: Option<Var>,
    y: usize,
    lambda: f64,
) -> Result<LossTerms, LossError> {
    let ce = cross_entropy_var(tape, logits_orig, y)?;
    let ce_value = tape.scalar(ce);
    let Some(unbias) = logits_unbias.filter(|_| lambda != 0.0) else {
        return Ok(LossTerms {
            total: ce,
            ce: ce_value,
            jsd: 0.0,
        });
    };
    let p_orig = tape.softmax_rows(logits_orig)?;
    let p_unbias = tape.softmax_rows(unbias)?;
    let j = jsd_var(tape, p_unbias, p_orig)?;
    let jsd_value = tape.scalar(j);
    let weighted = tape.scale(j, lambda)?;
    let total = tape.add(ce, weighted)?;
    Ok(LossTerms {
        total,
        ce: ce_value,
        jsd: jsd_value,
    })
}

pub fn er_loss_var(tape: &mut Tape, p_bias: &[f64], logits_debias: Var, y: usize) -> Result<Var, LossError> {
    check_distribution(p_bias)?;
    let ce = cross_entropy_var(tape, logits_debias, y)?;
    Ok(tape.scale(ce, 1.0 - p_bias[y])?)
}

pub fn poe_loss_var(
    tape: &mut Tape,
    p_bias: &[f64],
    logits_debias: Var,
    y: usize,
    form: PoeForm,
) -> Result<Var, LossError> {
    check_distribution(p_bias)?;
    let k = p_bias.len();
    if tape.value(logits_debias).len() != k {
        return Err(LossError::LengthMismatch(k, tape.value(logits_debias).len()));
    }
    let combined = match form {
        PoeForm::LogSpace => {
            let log_bias: Vec<f64> = p_bias.iter().map(|p| p.max(LOG_FLOOR).ln()).collect();
            let lb = tape.constant(Tensor::vector(log_bias));
            let ld = tape.log_softmax_rows(logits_debias)?;
            tape.add(lb, ld)?
        }
        PoeForm::ProbabilitySum => {
            let pb = tape.constant(Tensor::vector(p_bias.to_vec()));
            let pd = tape.softmax_rows(logits_debias)?;
            tape.add(pb, pd)?
        }
    };
    cross_entropy_var(tape, combined, y)
}
