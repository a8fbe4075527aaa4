use rand::{Rng, RngExt};

use crate::{DnrError, Result};

/// Softmax restricted to `feasible` cells of a flattened logit table.
///
/// Infeasible cells receive exactly zero. Stabilized by the largest feasible logit.
pub fn masked_softmax(logits: &[f64], feasible: &[usize]) -> Result<Vec<f64>> {
    let mut out = vec![0.0; logits.len()];
    let probs = masked_softmax_at(logits, feasible)?;
    for (&k, p) in feasible.iter().zip(probs) {
        out[k] = p;
    }
    Ok(out)
}

/// Probabilities of the feasible cells only, in the order of `feasible`.
pub fn masked_softmax_at(logits: &[f64], feasible: &[usize]) -> Result<Vec<f64>> {
    if feasible.is_empty() {
        return Err(DnrError::Contract("masked softmax over an all-zero mask".into()));
    }
    let max = feasible
        .iter()
        .map(|&k| logits[k])
        .fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = feasible.iter().map(|&k| (logits[k] - max).exp()).collect();
    let z: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= z;
    }
    Ok(probs)
}

/// Log-probabilities of the feasible cells, in the order of `feasible`.
pub fn masked_log_softmax(logits: &[f64], feasible: &[usize]) -> Result<Vec<f64>> {
    if feasible.is_empty() {
        return Err(DnrError::Contract("masked softmax over an all-zero mask".into()));
    }
    let max = feasible
        .iter()
        .map(|&k| logits[k])
        .fold(f64::NEG_INFINITY, f64::max);
    let lse = max + feasible.iter().map(|&k| (logits[k] - max).exp()).sum::<f64>().ln();
    Ok(feasible.iter().map(|&k| logits[k] - lse).collect())
}

/// Inverse-CDF draw from a probability vector.
pub fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}
