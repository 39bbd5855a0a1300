//! Losses returning `(value, gradient w.r.t. logits)`.

use crate::activation::sigmoid_scalar;
use crate::error::{shape_err, Result};

/// Cross-entropy between `softmax(logits)` and a target distribution.
///
/// Logits of `-inf` are allowed as masks as long as the target puts no mass
/// on them.
pub fn softmax_ce(logits: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    if logits.len() != target.len() || logits.is_empty() {
        return shape_err(format!(
            "softmax_ce logits {} vs target {}",
            logits.len(),
            target.len()
        ));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = probs.iter().sum();
    let log_sum = sum.ln();
    let mut loss = 0.0;
    for (&z, &t) in logits.iter().zip(target) {
        if t != 0.0 {
            loss -= t * (z - max - log_sum);
        }
    }
    for (p, &t) in probs.iter_mut().zip(target) {
        *p = *p / sum - t;
    }
    Ok((loss, probs))
}

/// Mean per-cell binary logistic loss.
pub fn logistic_loss(logits: &[f64], targets: &[f64]) -> Result<(f64, Vec<f64>)> {
    if logits.len() != targets.len() || logits.is_empty() {
        return shape_err(format!(
            "logistic_loss logits {} vs targets {}",
            logits.len(),
            targets.len()
        ));
    }
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (&z, &t) in logits.iter().zip(targets) {
        // -[t log σ(z) + (1-t) log(1-σ(z))] = max(z,0) - z t + log(1 + e^{-|z|})
        loss += z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
        grad.push((sigmoid_scalar(z) - t) / n);
    }
    Ok((loss / n, grad))
}
