//! Class-balanced loss weights and the weighted softmax cross-entropy built
//! on them.
//!
//! The weight for a class with `n` samples is `(1 − β)/(1 − βⁿ)` with
//! β ∈ [0, 1). β = 0 recovers uniform weights; as β → 1 the weight tends to
//! `1/n` (inverse-frequency weighting). The loss is the standard negative
//! log-likelihood scaled by the true class's weight; the per-batch loss is
//! the arithmetic mean of per-example terms.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum BalanceError {
    #[error("beta must lie in [0, 1), got {0}")]
    BetaOutOfRange(f64),
    #[error("class {0} has zero samples; every class count must be >= 1")]
    ZeroCount(usize),
    #[error("logits contain a non-finite value")]
    NonFiniteLogits,
    #[error("true class {class} out of range for {classes} classes")]
    ClassOutOfRange { class: usize, classes: usize },
    #[error("{0} logit rows but {1} labels")]
    LengthMismatch(usize, usize),
}

/// Per-class loss weights derived from sample counts and β.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub beta: f64,
    pub counts: Vec<u64>,
    pub weights: Vec<f64>,
}

impl ClassWeights {
    /// All-ones weights (the unweighted case) for `classes` classes.
    pub fn uniform(classes: usize) -> Self {
        ClassWeights {
            beta: 0.0,
            counts: vec![1; classes],
            weights: vec![1.0; classes],
        }
    }
}

/// Evaluates `(1 − β)/(1 − βⁿ)`.
///
/// Uses the log1p/expm1 form so the denominator stays accurate when β is
/// close to 1 and βⁿ suffers cancellation.
fn class_weight(beta: f64, n: u64) -> f64 {
    if beta == 0.0 {
        return 1.0;
    }
    // 1 − βⁿ = −expm1(n·ln β)
    let denom = -(n as f64 * beta.ln()).exp_m1();
    (1.0 - beta) / denom
}

pub fn compute_class_weights(counts: &[u64], beta: f64) -> Result<ClassWeights, BalanceError> {
    if !(0.0..1.0).contains(&beta) {
        return Err(BalanceError::BetaOutOfRange(beta));
    }
    if let Some(i) = counts.iter().position(|&n| n == 0) {
        return Err(BalanceError::ZeroCount(i));
    }
    Ok(ClassWeights {
        beta,
        counts: counts.to_vec(),
        weights: counts.iter().map(|&n| class_weight(beta, n)).collect(),
    })
}

/// `weight × (−log softmax(z)[true_class])` in log-sum-exp form.
pub fn weighted_ce_loss(
    logits: &[f64],
    true_class: usize,
    weight: f64,
) -> Result<f64, BalanceError> {
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(BalanceError::NonFiniteLogits);
    }
    if true_class >= logits.len() {
        return Err(BalanceError::ClassOutOfRange {
            class: true_class,
            classes: logits.len(),
        });
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_sum_exp = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    Ok(weight * (log_sum_exp - logits[true_class]))
}

/// Gradient of [`weighted_ce_loss`] w.r.t. the logits:
/// `weight × (softmax(z) − onehot(true_class))`.
pub fn weighted_ce_grad(logits: &[f64], true_class: usize, weight: f64) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter()
        .enumerate()
        .map(|(j, e)| weight * (e / sum - f64::from(j == true_class)))
        .collect()
}

/// Mean of per-example weighted losses, each example weighted by its true
/// class's weight.
pub fn batch_loss(
    logit_rows: ArrayView2<'_, f64>,
    true_classes: &[usize],
    class_weights: &ClassWeights,
) -> Result<f64, BalanceError> {
    if logit_rows.nrows() != true_classes.len() {
        return Err(BalanceError::LengthMismatch(
            logit_rows.nrows(),
            true_classes.len(),
        ));
    }
    let mut sum = 0.0;
    for (row, &y) in logit_rows.rows().into_iter().zip(true_classes) {
        let weight = *class_weights
            .weights
            .get(y)
            .ok_or(BalanceError::ClassOutOfRange {
                class: y,
                classes: class_weights.weights.len(),
            })?;
        sum += weighted_ce_loss(row.as_slice().expect("contiguous row"), y, weight)?;
    }
    Ok(sum / true_classes.len().max(1) as f64)
}
