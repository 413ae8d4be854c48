//! Numerical operations on token probability distributions.
//!
//! Every decoding step runs the same pipeline per channel: `softmax` each
//! prompt's logits at the effective temperature, `blend` the two results,
//! `top_k_filter` the blend, then `sample` (or `argmax`) a token.

use std::ops::Deref;

use rand::Rng;

use crate::error::{Error, Result};

/// Absolute tolerance on the sum of a [`Distribution`].
pub const NORMALIZATION_TOLERANCE: f64 = 1e-6;

/// A normalized probability vector over a token vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution {
    probs: Vec<f64>,
}

impl Distribution {
    /// Checks the vector is non-negative and sums to one.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Input("distribution is empty".into()));
        }
        if let Some(i) = probs.iter().position(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Input(format!(
                "probability {} at index {i} is not a finite non-negative number",
                probs[i]
            )));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > NORMALIZATION_TOLERANCE {
            return Err(Error::Input(format!("probabilities sum to {sum}, not 1")));
        }
        Ok(Self { probs })
    }

    /// The uniform distribution over `len` tokens.
    pub fn uniform(len: usize) -> Result<Self> {
        if len == 0 {
            return Err(Error::Input("distribution is empty".into()));
        }
        Ok(Self {
            probs: vec![1.0 / len as f64; len],
        })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.probs
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        -self
            .probs
            .iter()
            .filter(|p| **p > 0.0)
            .map(|p| p * p.ln())
            .sum::<f64>()
    }

    /// Total probability assigned to `tokens`.
    pub fn mass_on(&self, tokens: &[usize]) -> f64 {
        tokens.iter().filter_map(|&t| self.probs.get(t)).sum()
    }
}

impl Deref for Distribution {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.probs
    }
}

/// Weight of the incoming prompt's distribution in a blend, in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Default)]
pub struct BlendWeight(f64);

impl BlendWeight {
    pub const ZERO: BlendWeight = BlendWeight(0.0);
    pub const ONE: BlendWeight = BlendWeight(1.0);

    pub fn new(w: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&w) {
            return Err(Error::Parameter(format!("blend weight {w} outside [0, 1]")));
        }
        Ok(Self(w))
    }

    pub fn get(self) -> f64 {
        self.0
    }

    /// True when the incoming distribution contributes nothing.
    pub fn is_zero(self) -> bool {
        self.0 == 0.0
    }
}

/// Temperature-scaled softmax with max subtraction.
pub fn softmax(logits: &[f64], temperature: f64) -> Result<Distribution> {
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(Error::Parameter(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if logits.is_empty() {
        return Err(Error::Input("logit vector is empty".into()));
    }
    if let Some(i) = logits.iter().position(|l| !l.is_finite()) {
        return Err(Error::Input(format!(
            "logit {} at index {i} is not finite",
            logits[i]
        )));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = logits
        .iter()
        .map(|l| ((l - max) / temperature).exp())
        .collect();
    // The max entry contributes exp(0) = 1, so the sum is at least 1.
    let sum: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= sum;
    }
    Ok(Distribution { probs })
}

/// Convex combination `(1 - w) * p + w * q`.
///
/// The endpoints are exact: `w = 0` returns `p` and `w = 1` returns `q`
/// bit for bit.
pub fn blend(p: &Distribution, q: &Distribution, w: BlendWeight) -> Result<Distribution> {
    if p.len() != q.len() {
        return Err(Error::Input(format!(
            "cannot blend distributions of length {} and {}",
            p.len(),
            q.len()
        )));
    }
    let w = w.get();
    if w == 0.0 {
        return Ok(p.clone());
    }
    if w == 1.0 {
        return Ok(q.clone());
    }
    let probs = p
        .iter()
        .zip(q.iter())
        .map(|(a, b)| (1.0 - w) * a + w * b)
        .collect();
    Ok(Distribution { probs })
}

/// Token indices ordered by descending probability, ties toward the lower index.
pub fn ranked_indices(d: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..d.len()).collect();
    // Stable sort keeps equal probabilities in index order.
    idx.sort_by(|&a, &b| d[b].total_cmp(&d[a]));
    idx
}

/// Keeps the `k` most probable tokens and renormalizes them.
pub fn top_k_filter(d: &Distribution, k: usize) -> Result<Distribution> {
    if k == 0 {
        return Err(Error::Parameter("top-k must be at least 1".into()));
    }
    if k >= d.len() {
        return Ok(d.clone());
    }
    let mut probs = vec![0.0; d.len()];
    let mut survivors = 0.0;
    for &i in ranked_indices(d).iter().take(k) {
        probs[i] = d[i];
        survivors += d[i];
    }
    if survivors <= 0.0 {
        // Every kept entry is zero only when more than V-k entries are zero
        // and the ranking fell into them; keep the top index outright.
        let top = argmax(d);
        probs[top] = 1.0;
        return Ok(Distribution { probs });
    }
    for p in &mut probs {
        *p /= survivors;
    }
    Ok(Distribution { probs })
}

/// Draws a token by inverting the cumulative distribution at a uniform draw.
///
/// Consumes exactly one `f64` from `rng` per call.
pub fn sample<R: Rng + ?Sized>(d: &Distribution, rng: &mut R) -> Result<usize> {
    let u: f64 = rng.random::<f64>();
    let mut cumulative = 0.0;
    let mut last_nonzero = None;
    for (i, &p) in d.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        cumulative += p;
        last_nonzero = Some(i);
        if u < cumulative {
            return Ok(i);
        }
    }
    // Rounding can leave the cumulative sum a hair below one.
    last_nonzero.ok_or_else(|| Error::Internal("cannot sample an all-zero distribution".into()))
}

/// Index of the largest probability, lowest index on ties.
pub fn argmax(d: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in d.iter().enumerate().skip(1) {
        if p > d[best] {
            best = i;
        }
    }
    best
}
