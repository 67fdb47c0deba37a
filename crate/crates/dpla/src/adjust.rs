//! The two-stage logit adjustment at the heart of the method.
//!
//! Stage one shifts known-class logits by a log prior built from labeled
//! class sizes and problem scale, so tail classes are not drowned out
//! when picking pseudo-labels. Stage two rescales logits with per-class
//! weights derived from the model's own prediction frequencies over the
//! unlabeled pool, which also covers the novel slots where no labeled
//! counts exist.

use crate::error::{Error, Result};
use crate::numerics::{argmax, softmax};

/// Reference class count the adjustment strength is calibrated against.
pub const BASE_CLASSES: usize = 10;
/// Reference input size the adjustment strength is calibrated against.
pub const BASE_INPUT_DIM: usize = 1024;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Per-known-class adjustment factors:
/// `omega_c = 10 * ceil(C / 10) * sqrt(S / 1024) * count_c`
/// where `C` is the total class count (known plus novel), `S` the input
/// dimensionality, and `count_c` the raw labeled count of class `c`.
pub fn compute_omega(
    labeled_counts: &[usize],
    total_classes: usize,
    input_dim: usize,
) -> Result<Vec<f64>> {
    if labeled_counts.is_empty() {
        return Err(Error::invalid("labeled_counts must be non-empty"));
    }
    if total_classes < labeled_counts.len() {
        return Err(Error::invalid(
            "total_classes smaller than the number of known classes",
        ));
    }
    if input_dim == 0 {
        return Err(Error::invalid("input_dim must be >= 1"));
    }
    if labeled_counts.iter().any(|&c| c == 0) {
        return Err(Error::invalid(
            "every known class needs at least one labeled sample",
        ));
    }
    let class_factor = 10.0 * (total_classes as f64 / BASE_CLASSES as f64).ceil();
    let scale_factor = (input_dim as f64 / BASE_INPUT_DIM as f64).sqrt();
    Ok(labeled_counts
        .iter()
        .map(|&c| class_factor * scale_factor * c as f64)
        .collect())
}

/// Known-class logits with the stage-one shift applied:
/// `f_c - tau * ln(omega_c)` for `c` in the known slots, remaining
/// slots untouched.
pub fn adjusted_logits(logits: &[f64], omega: &[f64], tau: f64) -> Result<Vec<f64>> {
    if omega.len() > logits.len() {
        return Err(Error::invalid("more adjustment factors than logit slots"));
    }
    if omega.iter().any(|&o| !(o > 0.0)) {
        return Err(Error::invalid("adjustment factors must be positive"));
    }
    let mut out = logits.to_vec();
    for (l, o) in out.iter_mut().zip(omega) {
        *l -= tau * o.ln();
    }
    Ok(out)
}

/// Stage-one prediction: argmax of the adjusted logits over the known
/// slots only. Ties resolve to the lowest index.
pub fn first_stage_predict(logits: &[f64], omega: &[f64], tau1: f64) -> Result<usize> {
    let adjusted = adjusted_logits(logits, omega, tau1)?;
    Ok(argmax(&adjusted[..omega.len()]))
}

/// Pseudo-label refinement: apply the stage-one shift (with its own
/// temperature) to the known slots, then argmax over all slots. The
/// shift can hand a sample from a head known class to a novel slot.
pub fn refine_pseudo_label(logits: &[f64], omega: &[f64], tau2: f64) -> Result<usize> {
    let adjusted = adjusted_logits(logits, omega, tau2)?;
    Ok(argmax(&adjusted))
}

/// `softmax(logits / tau)` for `tau > 0`.
pub fn temperature_scaled_probs(logits: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("temperature must be > 0, got {tau}")));
    }
    let scaled: Vec<f64> = logits.iter().map(|&l| l / tau).collect();
    softmax(&scaled)
}

/// Smoothed per-class frequency of predicted labels:
/// `(count_c + 1) / (n + C)`. The add-one keeps every class represented
/// even when the model never predicts it.
pub fn estimate_frequencies(predictions: &[usize], total_classes: usize) -> Result<Vec<f64>> {
    if total_classes == 0 {
        return Err(Error::invalid("total_classes must be >= 1"));
    }
    let mut counts = vec![0usize; total_classes];
    for &p in predictions {
        if p >= total_classes {
            return Err(Error::invalid(format!(
                "prediction {p} outside class range 0..{total_classes}"
            )));
        }
        counts[p] += 1;
    }
    let denom = (predictions.len() + total_classes) as f64;
    Ok(counts.iter().map(|&c| (c + 1) as f64 / denom).collect())
}

/// Stage-two weights from estimated frequencies:
/// `w_c = sigmoid(exp(pi_max - pi_c)) * (alpha - beta) + beta`.
/// Rare classes get weights near `alpha`, the most frequent class sits
/// at `sigmoid(1) * (alpha - beta) + beta`.
pub fn second_stage_weights(frequencies: &[f64], alpha: f64, beta: f64) -> Result<Vec<f64>> {
    if frequencies.is_empty() {
        return Err(Error::invalid("frequencies must be non-empty"));
    }
    if !(alpha >= beta) {
        return Err(Error::invalid(format!(
            "alpha ({alpha}) must be >= beta ({beta})"
        )));
    }
    if frequencies.iter().any(|f| !f.is_finite() || *f < 0.0) {
        return Err(Error::invalid("frequencies must be finite and non-negative"));
    }
    let pi_max = frequencies.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(frequencies
        .iter()
        .map(|&pi| sigmoid((pi_max - pi).exp()) * (alpha - beta) + beta)
        .collect())
}

/// Class-frequency evidence gathered once per epoch: raw labeled counts
/// per known class and the smoothed prediction frequencies over the
/// whole unlabeled pool (all classes, novel slots included).
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyTable {
    pub labeled_counts: Vec<usize>,
    pub ratios: Vec<f64>,
}

impl FrequencyTable {
    pub fn build(
        labeled_counts: Vec<usize>,
        predictions: &[usize],
        total_classes: usize,
    ) -> Result<FrequencyTable> {
        if labeled_counts.len() > total_classes {
            return Err(Error::invalid(
                "more labeled classes than total classes",
            ));
        }
        let ratios = estimate_frequencies(predictions, total_classes)?;
        Ok(FrequencyTable {
            labeled_counts,
            ratios,
        })
    }
}

/// Elementwise product of logits and stage-two weights.
pub fn scale_logits(logits: &[f64], weights: &[f64]) -> Result<Vec<f64>> {
    if logits.len() != weights.len() {
        return Err(Error::invalid("logit/weight length mismatch"));
    }
    Ok(logits.iter().zip(weights).map(|(l, w)| l * w).collect())
}

/// Confidence gate: a sample participates in the pseudo-label loss iff
/// its top probability reaches the threshold.
pub fn confidence_mask(probs: &[f64], threshold: f64) -> bool {
    probs
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max)
        >= threshold
}
