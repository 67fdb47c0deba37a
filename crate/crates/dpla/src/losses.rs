//! Loss terms and their analytic gradients. Every function returns a
//! [`LossValue`] whose gradient is taken with respect to the matrix the
//! function receives: logits for the cross-entropy family, probability
//! rows for the pairwise and entropy terms. Callers chain through
//! softmax or logit scaling themselves.

use crate::error::{Error, Result};
use crate::numerics::{log_softmax, softmax, Matrix};

const PROB_CLAMP: f64 = 1e-7;

/// A scalar loss with its batch gradient.
#[derive(Debug, Clone)]
pub struct LossValue {
    pub value: f64,
    pub grad: Matrix,
}

impl LossValue {
    pub fn zero(rows: usize, cols: usize) -> LossValue {
        LossValue {
            value: 0.0,
            grad: Matrix::zeros(rows, cols),
        }
    }
}

fn check_targets(targets: &[usize], rows: usize, cols: usize) -> Result<()> {
    if targets.len() != rows {
        return Err(Error::invalid(format!(
            "{} targets for {rows} logit rows",
            targets.len()
        )));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= cols) {
        return Err(Error::invalid(format!(
            "target {t} outside class range 0..{cols}"
        )));
    }
    Ok(())
}

/// Batch-mean cross entropy, `-log_softmax(logits)[target]` per row.
/// Gradient per row is `(softmax - one_hot) / n`.
pub fn ce_loss(logits: &Matrix, targets: &[usize]) -> Result<LossValue> {
    if logits.rows() == 0 {
        return Err(Error::invalid("cross entropy needs a non-empty batch"));
    }
    check_targets(targets, logits.rows(), logits.cols())?;
    let n = logits.rows() as f64;
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    let mut total = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        let row = logits.row(r);
        total -= log_softmax(row)?[t];
        let probs = softmax(row)?;
        for (c, &p) in probs.iter().enumerate() {
            let delta = if c == t { 1.0 } else { 0.0 };
            grad.set(r, c, (p - delta) / n);
        }
    }
    Ok(LossValue {
        value: total / n,
        grad,
    })
}

/// Cross entropy on logits shifted by the stage-one prior:
/// `ce_loss(f + tau1 * ln(omega), y)`, the shift applied to the slots
/// `omega` covers. The shift is constant per slot, so the gradient with
/// respect to the original logits is unchanged by it.
pub fn balanced_ce_labeled(
    logits: &Matrix,
    targets: &[usize],
    omega: &[f64],
    tau1: f64,
) -> Result<LossValue> {
    if omega.len() > logits.cols() {
        return Err(Error::invalid("more adjustment factors than logit slots"));
    }
    if omega.iter().any(|&o| !(o > 0.0)) {
        return Err(Error::invalid("adjustment factors must be positive"));
    }
    let mut shifted = logits.clone();
    for r in 0..shifted.rows() {
        for (v, o) in shifted.row_mut(r).iter_mut().zip(omega) {
            *v += tau1 * o.ln();
        }
    }
    ce_loss(&shifted, targets)
}

/// Confidence-gated cross entropy against pseudo-labels, averaged over
/// the masked-in rows only. No rows masked in gives zero loss and zero
/// gradient. The pseudo-labels and the mask are constants.
pub fn masked_pseudo_ce(
    scaled_logits: &Matrix,
    pseudo_labels: &[usize],
    mask: &[bool],
) -> Result<LossValue> {
    check_targets(pseudo_labels, scaled_logits.rows(), scaled_logits.cols())?;
    if mask.len() != scaled_logits.rows() {
        return Err(Error::invalid("mask length does not match batch size"));
    }
    let kept = mask.iter().filter(|&&m| m).count();
    if kept == 0 {
        return Ok(LossValue::zero(scaled_logits.rows(), scaled_logits.cols()));
    }
    let n = kept as f64;
    let mut grad = Matrix::zeros(scaled_logits.rows(), scaled_logits.cols());
    let mut total = 0.0;
    for r in 0..scaled_logits.rows() {
        if !mask[r] {
            continue;
        }
        let row = scaled_logits.row(r);
        let t = pseudo_labels[r];
        total -= log_softmax(row)?[t];
        let probs = softmax(row)?;
        for (c, &p) in probs.iter().enumerate() {
            let delta = if c == t { 1.0 } else { 0.0 };
            grad.set(r, c, (p - delta) / n);
        }
    }
    Ok(LossValue {
        value: total / n,
        grad,
    })
}

/// One pair in the pairwise term: two row indices and whether they are
/// believed to share a class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairTarget {
    pub i: usize,
    pub j: usize,
    pub same: bool,
}

fn check_probs(probs: &Matrix) -> Result<()> {
    for r in 0..probs.rows() {
        let mut sum = 0.0;
        for &p in probs.row(r) {
            if !p.is_finite() || p < -1e-12 {
                return Err(Error::invalid("probabilities must be finite and non-negative"));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > 1e-3 {
            return Err(Error::invalid(format!(
                "probability row {r} sums to {sum}, expected 1"
            )));
        }
    }
    Ok(())
}

/// Dot-product agreement loss over sample pairs:
/// `-[s ln(p_i . p_j) + (1 - s) ln(1 - p_i . p_j)]` averaged over the
/// pairs, dot products clamped to `[1e-7, 1 - 1e-7]`. A clamped pair
/// contributes no gradient. Gradient is with respect to the probability
/// rows. An empty pair set is a no-op.
pub fn pairwise_loss(probs: &Matrix, pairs: &[PairTarget]) -> Result<LossValue> {
    check_probs(probs)?;
    if pairs.is_empty() {
        return Ok(LossValue::zero(probs.rows(), probs.cols()));
    }
    let n = pairs.len() as f64;
    let mut grad = Matrix::zeros(probs.rows(), probs.cols());
    let mut total = 0.0;
    for pair in pairs {
        if pair.i >= probs.rows() || pair.j >= probs.rows() {
            return Err(Error::invalid(format!(
                "pair ({}, {}) outside batch of {} rows",
                pair.i,
                pair.j,
                probs.rows()
            )));
        }
        let pi = probs.row(pair.i);
        let pj = probs.row(pair.j);
        let raw: f64 = pi.iter().zip(pj).map(|(a, b)| a * b).sum();
        let dot = raw.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        let (value, coeff) = if pair.same {
            (-dot.ln(), -1.0 / dot)
        } else {
            (-(1.0 - dot).ln(), 1.0 / (1.0 - dot))
        };
        total += value;
        if raw > PROB_CLAMP && raw < 1.0 - PROB_CLAMP {
            let scale = coeff / n;
            for c in 0..probs.cols() {
                grad.set(pair.i, c, grad.get(pair.i, c) + scale * pj[c]);
                grad.set(pair.j, c, grad.get(pair.j, c) + scale * pi[c]);
            }
        }
    }
    Ok(LossValue {
        value: total / n,
        grad,
    })
}

/// Distance of the batch-mean prediction from uniform:
/// `ln(width) - H(mean row)` in nats. Non-negative, zero exactly when
/// the batch marginal is uniform. Gradient is with respect to the
/// probability rows.
pub fn entropy_reg(probs: &Matrix) -> Result<LossValue> {
    if probs.rows() == 0 {
        return Err(Error::invalid("entropy regularizer needs a non-empty batch"));
    }
    check_probs(probs)?;
    let n = probs.rows() as f64;
    let cols = probs.cols();
    let mut mean = vec![0.0; cols];
    for r in 0..probs.rows() {
        for (m, &p) in mean.iter_mut().zip(probs.row(r)) {
            *m += p / n;
        }
    }
    let mut value = (cols as f64).ln();
    let mut grad = Matrix::zeros(probs.rows(), cols);
    for (c, &m) in mean.iter().enumerate() {
        let m = m.max(PROB_CLAMP);
        value += m * m.ln();
        let g = (m.ln() + 1.0) / n;
        for r in 0..probs.rows() {
            grad.set(r, c, g);
        }
    }
    Ok(LossValue { value, grad })
}

/// Weighted sum of the four loss terms:
/// `pair + lambda1 * ce + lambda2 * balanced + reg`, gradients combined
/// the same way. All gradients must live in the same space and shape.
pub fn total_loss(
    pair: &LossValue,
    ce: &LossValue,
    balanced: &LossValue,
    reg: &LossValue,
    lambda1: f64,
    lambda2: f64,
) -> Result<LossValue> {
    let shape = (pair.grad.rows(), pair.grad.cols());
    for part in [ce, balanced, reg] {
        if (part.grad.rows(), part.grad.cols()) != shape {
            return Err(Error::invalid("loss gradients have mismatched shapes"));
        }
    }
    for (name, part) in [
        ("pairwise", pair),
        ("cross-entropy", ce),
        ("balanced", balanced),
        ("regularizer", reg),
    ] {
        if !part.value.is_finite() {
            return Err(Error::NonFinite(format!("{name} loss is not finite")));
        }
    }
    let value = pair.value + lambda1 * ce.value + lambda2 * balanced.value + reg.value;
    let mut grad = pair.grad.clone();
    let mut scaled = ce.grad.clone();
    scaled.scale(lambda1);
    grad.add_assign(&scaled);
    let mut scaled = balanced.grad.clone();
    scaled.scale(lambda2);
    grad.add_assign(&scaled);
    grad.add_assign(&reg.grad);
    Ok(LossValue { value, grad })
}
