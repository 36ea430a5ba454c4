//! Categorical-distribution math shared by every other module.
//!
//! All logarithms are natural. Sums over the vocabulary are taken over the
//! per-index terms sorted ascending, so every statistic here is bit-identical
//! under any permutation of vocabulary indices.

use std::borrow::Cow;

use crate::error::{invalid_input, Error, Result};

/// Probabilities are clamped to this floor (and renormalized) before any
/// logarithm or KL ratio is taken.
pub const PROB_FLOOR: f64 = 1e-12;

/// Tolerance on `|Σp - 1|` accepted by [`ProbVector::new`].
pub const SUM_TOLERANCE: f64 = 1e-9;

/// Unnormalized scores over a vocabulary of size `V >= 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitVector(Vec<f64>);

impl LogitVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(invalid_input(format!(
                "vocabulary size must be >= 2, got {}",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(invalid_input(format!("non-finite logit at index {i}")));
        }
        Ok(Self(values))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// A categorical distribution: nonnegative entries summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(invalid_input(format!(
                "vocabulary size must be >= 2, got {}",
                probs.len()
            )));
        }
        for (i, &p) in probs.iter().enumerate() {
            if !p.is_finite() || p < 0.0 {
                return Err(invalid_input(format!("invalid probability {p} at index {i}")));
            }
        }
        let total = ordered_sum(probs.clone());
        if (total - 1.0).abs() > SUM_TOLERANCE {
            return Err(invalid_input(format!("probabilities sum to {total}, not 1")));
        }
        Ok(Self(probs))
    }

    pub fn uniform(vocab: usize) -> Result<Self> {
        if vocab < 2 {
            return Err(invalid_input("vocabulary size must be >= 2"));
        }
        Ok(Self(vec![1.0 / vocab as f64; vocab]))
    }

    pub fn one_hot(vocab: usize, index: usize) -> Result<Self> {
        if vocab < 2 || index >= vocab {
            return Err(invalid_input(format!(
                "one-hot index {index} invalid for vocabulary {vocab}"
            )));
        }
        let mut probs = vec![0.0; vocab];
        probs[index] = 1.0;
        Ok(Self(probs))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Index of the largest probability (lowest index on ties).
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.0.iter().enumerate() {
            if p > self.0[best] {
                best = i;
            }
        }
        best
    }

    /// Reorders entries so that `out[i] = self[perm[i]]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                got: perm.len(),
            });
        }
        Ok(Self(perm.iter().map(|&j| self.0[j]).collect()))
    }
}

/// Sums terms in ascending order. The result does not depend on the order
/// in which the terms were supplied.
pub(crate) fn ordered_sum(mut terms: Vec<f64>) -> f64 {
    terms.sort_unstable_by(f64::total_cmp);
    terms.into_iter().sum()
}

/// Clamps entries to [`PROB_FLOOR`] and renormalizes. Distributions with no
/// entry below the floor are returned untouched.
pub fn floor_smoothed(p: &ProbVector) -> Cow<'_, [f64]> {
    if p.0.iter().all(|&x| x >= PROB_FLOOR) {
        return Cow::Borrowed(&p.0);
    }
    let clamped: Vec<f64> = p.0.iter().map(|&x| x.max(PROB_FLOOR)).collect();
    let total = ordered_sum(clamped.clone());
    Cow::Owned(clamped.into_iter().map(|x| x / total).collect())
}

/// Numerically stable softmax of `logits / temperature`.
pub fn softmax(logits: &LogitVector, temperature: f64) -> Result<ProbVector> {
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(invalid_input(format!(
            "temperature must be positive and finite, got {temperature}"
        )));
    }
    let max = logits.0.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits
        .0
        .iter()
        .map(|&l| ((l - max) / temperature).exp())
        .collect();
    let total = ordered_sum(exps.clone());
    Ok(ProbVector(exps.into_iter().map(|e| e / total).collect()))
}

/// Shannon entropy in nats, with `0 log 0 = 0`.
pub fn entropy(p: &ProbVector) -> f64 {
    let terms: Vec<f64> = p
        .0
        .iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| -x * x.ln())
        .collect();
    let max = (p.len() as f64).ln();
    ordered_sum(terms).clamp(0.0, max)
}

/// Entropy divided by `ln V`, in `[0, 1]`.
pub fn normalized_entropy(p: &ProbVector) -> f64 {
    (entropy(p) / (p.len() as f64).ln()).clamp(0.0, 1.0)
}

/// Difference between the two largest probabilities.
pub fn top2_margin(p: &ProbVector) -> f64 {
    let (mut first, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &x in &p.0 {
        if x > first {
            second = first;
            first = x;
        } else if x > second {
            second = x;
        }
    }
    (first - second).clamp(0.0, 1.0)
}

/// `KL(p || q)` after floor smoothing of both arguments.
pub fn kl_divergence(p: &ProbVector, q: &ProbVector) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::DimensionMismatch {
            expected: p.len(),
            got: q.len(),
        });
    }
    let ps = floor_smoothed(p);
    let qs = floor_smoothed(q);
    let terms: Vec<f64> = ps
        .iter()
        .zip(qs.iter())
        .map(|(&a, &b)| a * (a / b).ln())
        .collect();
    Ok(ordered_sum(terms).max(0.0))
}

/// Mean negative log-probability of the `k` most likely tokens. Selected
/// entries below [`PROB_FLOOR`] are clamped to it.
pub fn topk_log_confidence(p: &ProbVector, k: usize) -> Result<f64> {
    if k == 0 || k > p.len() {
        return Err(invalid_input(format!(
            "k must be in 1..={}, got {k}",
            p.len()
        )));
    }
    let mut sorted = p.0.clone();
    sorted.sort_unstable_by(|a, b| b.total_cmp(a));
    let terms: Vec<f64> = sorted[..k].iter().map(|&x| -x.max(PROB_FLOOR).ln()).collect();
    Ok(ordered_sum(terms) / k as f64)
}

/// Classifier-free guidance on logits: `uncond + scale * (cond - uncond)`.
pub fn cfg_combine(cond: &LogitVector, uncond: &LogitVector, scale: f64) -> Result<LogitVector> {
    if cond.len() != uncond.len() {
        return Err(Error::DimensionMismatch {
            expected: cond.len(),
            got: uncond.len(),
        });
    }
    if !scale.is_finite() {
        return Err(invalid_input(format!("guidance scale must be finite, got {scale}")));
    }
    let out = cond
        .0
        .iter()
        .zip(&uncond.0)
        .map(|(&c, &u)| u + scale * (c - u))
        .collect();
    LogitVector::new(out)
}
