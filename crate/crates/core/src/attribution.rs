//! Integrated Gradients over token embeddings and top-N shortcut selection.
//!
//! The path runs from the all-zero embedding baseline to the input in `m`
//! equal steps; gradients are taken at the right endpoint of every segment
//! (`k/m`, `k = 1..=m`) and averaged, then multiplied elementwise by the
//! input-minus-baseline difference. The attribution target is the predicted
//! probability of the gold label.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{is_reserved, PAD};
use crate::models::{ClassifierModel, ModelError};
use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum AttributionError {
    #[error("integration needs at least one step")]
    ZeroSteps,
    #[error("N must be at least 1")]
    ZeroTopN,
    #[error("target label {label} outside {num_labels} labels")]
    InvalidTarget { label: usize, num_labels: usize },
    #[error("non-finite gradient at integration step {step}")]
    NonFiniteGradient { step: usize },
    #[error("no eligible tokens to select from")]
    NoEligibleTokens,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionResult {
    /// `L × d`, zero rows at PAD positions.
    pub attributions: Tensor,
    /// Row ℓ2 norms of `attributions`.
    pub norms: Vec<f64>,
    /// Top-N positions, strongest first.
    pub selected: Vec<usize>,
    pub steps: usize,
}

/// Integrated Gradients of a scalar function of one matrix input, from the
/// zero baseline. `score` builds the scalar on a fresh tape for each step.
pub fn integrated_gradients_with<F>(input: &Tensor, steps: usize, score: F) -> Result<Tensor, AttributionError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, AttributionError>,
{
    if steps == 0 {
        return Err(AttributionError::ZeroSteps);
    }
    let mut total = Tensor::zeros(input.shape());
    for k in 1..=steps {
        let alpha = k as f64 / steps as f64;
        let mut point = input.clone();
        point.scale_in_place(alpha);
        let mut tape = Tape::new();
        let x = tape.leaf(point);
        let out = score(&mut tape, x)?;
        let grad = tape.backward(out).map_err(|e| match e {
            TensorError::NonFinite { .. } => AttributionError::NonFiniteGradient { step: k },
            other => other.into(),
        })?;
        let g = grad.wrt(x);
        if !g.is_finite() {
            return Err(AttributionError::NonFiniteGradient { step: k });
        }
        total.add_assign(&g)?;
    }
    let inv = 1.0 / steps as f64;
    for (t, x) in total.data_mut().iter_mut().zip(input.data()) {
        *t *= x * inv;
    }
    Ok(total)
}

/// `L × d` attribution of `ids` toward label `target` under `model`.
pub fn integrated_gradients(
    model: &ClassifierModel,
    ids: &[usize],
    target: usize,
    steps: usize,
) -> Result<Tensor, AttributionError> {
    let k = model.config.num_labels;
    if target >= k {
        return Err(AttributionError::InvalidTarget {
            label: target,
            num_labels: k,
        });
    }
    let (x, positions) = model.embed(ids)?;
    let compact = integrated_gradients_with(&x, steps, |tape, xv| {
        let bound = model.bind(tape, false);
        let out = model.forward_embedded(tape, &bound, xv)?;
        let probs = tape.softmax_rows(out.logits)?;
        Ok(tape.pick(probs, target)?)
    })?;
    let d = model.config.dim;
    let mut full = Tensor::zeros(&[ids.len(), d]);
    for (row, &p) in positions.iter().enumerate() {
        full.data_mut()[p * d..(p + 1) * d].copy_from_slice(compact.row(row));
    }
    Ok(full)
}

pub fn attribution_norms(g: &Tensor) -> Vec<f64> {
    let (rows, _) = g.rows_cols();
    (0..rows)
        .map(|r| g.row(r).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect()
}

/// Indices of the `n` largest norms among eligible positions, largest first;
/// ties go to the smaller index.
pub fn top_n_tokens(norms: &[f64], n: usize, eligible: &[bool]) -> Result<Vec<usize>, AttributionError> {
    if n == 0 {
        return Err(AttributionError::ZeroTopN);
    }
    let mut idx: Vec<usize> = (0..norms.len()).filter(|&i| eligible.get(i).copied().unwrap_or(false)).collect();
    if idx.is_empty() {
        return Err(AttributionError::NoEligibleTokens);
    }
    idx.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));
    idx.truncate(n);
    Ok(idx)
}

/// Non-PAD, non-reserved positions whose id is not in `excluded`.
pub fn eligibility(ids: &[usize], excluded: &HashSet<usize>) -> Vec<bool> {
    ids.iter()
        .map(|&t| t != PAD && !is_reserved(t) && !excluded.contains(&t))
        .collect()
}

/// Attribution, norms and top-N selection for one example.
pub fn identify_shortcuts(
    model: &ClassifierModel,
    ids: &[usize],
    label: usize,
    steps: usize,
    top_n: usize,
    excluded: &HashSet<usize>,
) -> Result<AttributionResult, AttributionError> {
    let attributions = integrated_gradients(model, ids, label, steps)?;
    let norms = attribution_norms(&attributions);
    let selected = top_n_tokens(&norms, top_n, &eligibility(ids, excluded))?;
    Ok(AttributionResult {
        attributions,
        norms,
        selected,
        steps,
    })
}

/// Largest norm over the total: how concentrated the attribution is.
pub fn top1_share(norms: &[f64]) -> f64 {
    let total: f64 = norms.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    norms.iter().copied().fold(0.0, f64::max) / total
}

/// `|Σ g − (f(x) − f(0))| / max(|f(x) − f(0)|, 1e-8)` for a classifier.
pub fn completeness_error(
    model: &ClassifierModel,
    ids: &[usize],
    target: usize,
    g: &Tensor,
) -> Result<f64, AttributionError> {
    let (x, _) = model.embed(ids)?;
    let prob_at = |input: Tensor| -> Result<f64, AttributionError> {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false);
        let xv = tape.constant(input);
        let out = model.forward_embedded(&mut tape, &bound, xv)?;
        Ok(crate::tensor::softmax(tape.value(out.logits).data())[target])
    };
    let shape = x.shape().to_vec();
    let delta = prob_at(x)? - prob_at(Tensor::zeros(&shape))?;
    let sum: f64 = g.data().iter().sum();
    Ok((sum - delta).abs() / delta.abs().max(1e-8))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{ClassifierConfig, EncoderKind};

    #[test]
    fn linear_scorer_is_exact_for_any_step_count() {
        let x = Tensor::matrix(2, 3, vec![0.5, -1.0, 2.0, 3.0, 0.25, -0.75]).unwrap();
        let w = Tensor::matrix(2, 3, vec![1.5, 2.0, -0.5, 0.1, -3.0, 4.0]).unwrap();
        for m in [1, 3, 32] {
            let g = integrated_gradients_with(&x, m, |tape, xv| {
                let wv = tape.constant(w.clone());
                let prod = tape.mul(xv, wv)?;
                Ok(tape.sum(prod)?)
            })
            .unwrap();
            for i in 0..6 {
                assert!((g.data()[i] - x.data()[i] * w.data()[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_input_has_zero_attribution() {
        let x = Tensor::zeros(&[3, 4]);
        let g = integrated_gradients_with(&x, 8, |tape, xv| {
            let s = tape.softmax_rows(xv)?;
            let p = tape.pick(s, 1)?;
            Ok(p)
        })
        .unwrap();
        assert!(g.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn zero_steps_rejected() {
        let mut cfg = ClassifierConfig::new(10, 3);
        cfg.dim = 4;
        let m = ClassifierModel::new(cfg);
        assert!(matches!(
            integrated_gradients(&m, &[4, 5], 0, 0),
            Err(AttributionError::ZeroSteps)
        ));
        assert!(matches!(
            integrated_gradients(&m, &[4, 5], 3, 4),
            Err(AttributionError::InvalidTarget { .. })
        ));
    }

    #[test]
    fn pad_rows_get_no_attribution() {
        let mut cfg = ClassifierConfig::new(10, 3);
        cfg.dim = 4;
        cfg.encoder = EncoderKind::Attention;
        let m = ClassifierModel::new(cfg);
        let g = integrated_gradients(&m, &[4, 5, PAD], 1, 4).unwrap();
        assert_eq!(g.shape(), &[3, 4]);
        assert!(g.row(2).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn norm_examples() {
        let g = Tensor::matrix(2, 2, vec![3.0, 4.0, 0.0, 0.0]).unwrap();
        assert_eq!(attribution_norms(&g), vec![5.0, 0.0]);
    }

    #[test]
    fn top_n_examples() {
        assert_eq!(top_n_tokens(&[0.1, 0.9, 0.5], 2, &[true; 3]).unwrap(), vec![1, 2]);
        assert_eq!(top_n_tokens(&[0.5, 0.5], 1, &[true; 2]).unwrap(), vec![0]);
        assert_eq!(top_n_tokens(&[0.5, 0.2], 3, &[true, true]).unwrap(), vec![0, 1]);
        assert_eq!(top_n_tokens(&[0.9, 0.2], 1, &[false, true]).unwrap(), vec![1]);
        assert!(matches!(
            top_n_tokens(&[0.9], 1, &[false]),
            Err(AttributionError::NoEligibleTokens)
        ));
    }

    #[test]
    fn reserved_tokens_are_ineligible() {
        let e = eligibility(&[5, crate::dataset::MASK, crate::dataset::UNK, 7, PAD], &HashSet::from([7]));
        assert_eq!(e, vec![true, false, false, false, false]);
    }
}
