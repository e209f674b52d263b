//! Softmax, cross-entropy and the entropy (confidence) penalty, together with
//! their gradients with respect to logits.

use super::Tensor;
use crate::error::{Error, Result};

/// Floor applied to probabilities inside every logarithm of a cross-entropy.
pub const LOG_EPS: f64 = 1e-12;

/// Tolerance used when checking that a vector lies on the probability simplex.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// Numerically stable softmax of one row, written into `out`.
pub fn softmax_into(logits: &[f64], out: &mut [f64]) -> Result<()> {
    if logits.len() < 2 {
        return Err(Error::Contract("softmax needs at least two classes".into()));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite logits {logits:?}")));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = (z - max).exp();
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
    Ok(())
}

pub fn softmax_vec(logits: &[f64]) -> Result<Vec<f64>> {
    let mut out = vec![0.0; logits.len()];
    softmax_into(logits, &mut out)?;
    Ok(out)
}

/// Row-wise softmax over the last dimension.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    let k = *logits.shape().last().unwrap_or(&0);
    let mut out = logits.clone();
    for (src, dst) in logits.data().chunks(k).zip(out.data_mut().chunks_mut(k)) {
        softmax_into(src, dst)?;
    }
    Ok(out)
}

pub fn check_simplex(p: &[f64], what: &str) -> Result<()> {
    let sum: f64 = p.iter().sum();
    if p.iter().any(|&v| !(v >= -SIMPLEX_TOL)) || (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::Contract(format!("{what} is not a probability vector: {p:?}")));
    }
    Ok(())
}

/// `−Σ t_c log max(p_c, 1e-12)`.
pub fn cross_entropy(target: &[f64], pred: &[f64]) -> Result<f64> {
    if target.len() != pred.len() {
        return Err(Error::Dimension(format!(
            "cross entropy: target has {} classes, prediction {}",
            target.len(),
            pred.len()
        )));
    }
    check_simplex(target, "target")?;
    check_simplex(pred, "prediction")?;
    Ok(cross_entropy_unchecked(target, pred))
}

pub(crate) fn cross_entropy_unchecked(target: &[f64], pred: &[f64]) -> f64 {
    -target
        .iter()
        .zip(pred)
        .filter(|(t, _)| **t != 0.0)
        .map(|(t, p)| t * p.max(LOG_EPS).ln())
        .sum::<f64>()
}

/// Shannon entropy in nats; `0·log 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

/// Entropy penalty `−β·Σ_rows H(row)` over a batch of probability rows.
pub fn confidence_penalty(pred: &Tensor, beta: f64) -> Result<f64> {
    if beta < 0.0 {
        return Err(Error::Contract(format!("entropy weight must be non-negative, got {beta}")));
    }
    let k = *pred.shape().last().unwrap_or(&0);
    let mut total = 0.0;
    for row in pred.data().chunks(k) {
        check_simplex(row, "prediction")?;
        total += entropy(row);
    }
    Ok(-beta * total)
}

/// Back-propagates `dL/dp` through a softmax: `dz = p ⊙ (g − ⟨p, g⟩)`.
pub fn softmax_backward(p: &[f64], dp: &[f64], dz: &mut [f64]) {
    let dot: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
    for ((z, &pv), &g) in dz.iter_mut().zip(p).zip(dp) {
        *z += pv * (g - dot);
    }
}

/// `weight·CE(target, softmax(z)) − β·H(softmax(z))` and its logit gradient,
/// added into `dz`. `p` must be `softmax(z)`.
///
/// The gradient is exact for the clamped loss: classes whose probability is
/// below the log floor contribute a constant and therefore no gradient.
pub fn softmax_ce_grad(p: &[f64], target: &[f64], weight: f64, beta: f64, dz: &mut [f64]) -> f64 {
    let mut loss = 0.0;
    let mut active_mass = 0.0;
    for (&t, &pv) in target.iter().zip(p) {
        if t == 0.0 {
            continue;
        }
        loss -= t * pv.max(LOG_EPS).ln();
        if pv >= LOG_EPS {
            active_mass += t;
        }
    }
    for ((z, &t), &pv) in dz.iter_mut().zip(target).zip(p) {
        let own = if pv >= LOG_EPS { t } else { 0.0 };
        *z += weight * (pv * active_mass - own);
    }
    loss *= weight;
    if beta > 0.0 {
        loss += entropy_penalty_grad(p, beta, dz);
    }
    loss
}

/// `−β·H(p)` for `p = softmax(z)`, adding `β·p_k(log p_k + H)` into `dz`.
pub fn entropy_penalty_grad(p: &[f64], beta: f64, dz: &mut [f64]) -> f64 {
    let h = entropy(p);
    for (z, &pv) in dz.iter_mut().zip(p) {
        if pv > 0.0 {
            *z += beta * pv * (pv.ln() + h);
        }
    }
    -beta * h
}
