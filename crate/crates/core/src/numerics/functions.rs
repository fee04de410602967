//! Scalar-valued loss primitives on plain slices.
//!
//! These are the untracked reference forms; the tape in [`super::tape`]
//! records the same computations when gradients are needed.

use crate::error::{Error, Result};

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity, clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::param(format!(
            "cosine similarity of vectors with lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (l2_norm(a), l2_norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateInput(
            "cosine similarity of a zero-norm vector".into(),
        ));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

fn check_temperature(temperature: f64) -> Result<()> {
    if temperature > 0.0 && temperature.is_finite() {
        Ok(())
    } else {
        Err(Error::param(format!(
            "temperature must be positive, got {temperature}"
        )))
    }
}

/// Temperature-scaled softmax with max subtraction.
pub fn softmax(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    check_temperature(temperature)?;
    if logits.is_empty() {
        return Err(Error::param("softmax of an empty vector"));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits
        .iter()
        .map(|&x| ((x - max) / temperature).exp())
        .collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// `log Σ exp(x)`, returned as `(max, log1p-term)` so that tiny tails keep
/// their precision: `lse = max + tail`.
fn log_sum_exp_parts(logits: &[f64]) -> (f64, f64) {
    let (arg, max) =
        logits
            .iter()
            .copied()
            .enumerate()
            .fold(
                (0, f64::NEG_INFINITY),
                |acc, (i, x)| if x > acc.1 { (i, x) } else { acc },
            );
    let rest: f64 = logits
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != arg)
        .map(|(_, &x)| (x - max).exp())
        .sum();
    (max, rest.ln_1p())
}

/// `log softmax(x)` at temperature 1, via log-sum-exp.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let (max, tail) = log_sum_exp_parts(logits);
    logits.iter().map(|&x| (x - max) - tail).collect()
}

/// `KL(target ‖ predicted)` with `0·log 0 := 0`.
pub fn kl_divergence(target: &[f64], predicted: &[f64]) -> Result<f64> {
    if target.len() != predicted.len() {
        return Err(Error::param(format!(
            "KL of distributions with lengths {} and {}",
            target.len(),
            predicted.len()
        )));
    }
    for (name, dist) in [("target", target), ("predicted", predicted)] {
        let s: f64 = dist.iter().sum();
        if (s - 1.0).abs() > 1e-6 || dist.iter().any(|&p| p < 0.0) {
            return Err(Error::param(format!(
                "{name} is not a probability vector (sum {s})"
            )));
        }
    }
    let mut total = 0.0;
    for (i, (&t, &p)) in target.iter().zip(predicted).enumerate() {
        if t == 0.0 {
            continue;
        }
        if p == 0.0 {
            return Err(Error::DivergenceUndefined {
                index: i,
                target: t,
            });
        }
        total += t * (t / p).ln();
    }
    Ok(total.max(0.0))
}

/// `-log softmax(logits)[target]`.
pub fn cross_entropy(logits: &[f64], target: usize) -> Result<f64> {
    if target >= logits.len() {
        return Err(Error::param(format!(
            "target index {target} out of range for {} logits",
            logits.len()
        )));
    }
    let (max, tail) = log_sum_exp_parts(logits);
    Ok((max - logits[target]) + tail)
}
