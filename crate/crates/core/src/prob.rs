//! Probability-vector and logit primitives.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Index of a class in `0..K`.
pub type ClassIndex = usize;

/// Tolerance on the total mass of a [`ProbabilityVector`].
pub const MASS_TOLERANCE: f64 = 1e-9;

/// Default finite substitute for `ln 0` used by [`clamped_log`].
pub const DEFAULT_CLAMP_FLOOR: f64 = -4.0;

/// A distribution over `K` classes: non-negative entries summing to one.
///
/// Used both for model predictions and for (one-hot or soft) targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ProbabilityVector(Vec<f64>);

impl ProbabilityVector {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidInput("empty probability vector".into()));
        }
        if let Some((k, p)) = probs
            .iter()
            .enumerate()
            .find(|(_, p)| !p.is_finite() || **p < 0.0 || **p > 1.0)
        {
            return Err(Error::InvalidInput(format!(
                "probability entry {k} = {p} is not in [0, 1]"
            )));
        }
        let mass: f64 = probs.iter().sum();
        if (mass - 1.0).abs() > MASS_TOLERANCE {
            return Err(Error::InvalidInput(format!(
                "probabilities sum to {mass}, expected 1"
            )));
        }
        Ok(Self(probs))
    }

    /// Uniform distribution over `classes` classes.
    pub fn uniform(classes: usize) -> Result<Self> {
        if classes == 0 {
            return Err(Error::InvalidInput("zero classes".into()));
        }
        Ok(Self(vec![1.0 / classes as f64; classes]))
    }

    /// Wraps values that are a distribution by construction (softmax output,
    /// averages of distributions).
    pub(crate) fn from_vec_unchecked(probs: Vec<f64>) -> Self {
        debug_assert!(probs.iter().all(|p| *p >= 0.0));
        debug_assert!((probs.iter().sum::<f64>() - 1.0).abs() <= MASS_TOLERANCE);
        Self(probs)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl std::ops::Index<usize> for ProbabilityVector {
    type Output = f64;

    fn index(&self, k: usize) -> &f64 {
        &self.0[k]
    }
}

impl TryFrom<Vec<f64>> for ProbabilityVector {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<ProbabilityVector> for Vec<f64> {
    fn from(p: ProbabilityVector) -> Self {
        p.0
    }
}

/// Pre-softmax class scores. All entries finite.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitVector(Vec<f64>);

impl LogitVector {
    pub fn new(logits: Vec<f64>) -> Result<Self> {
        if let Some(k) = logits.iter().position(|z| !z.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "logit {k} is not finite ({})",
                logits[k]
            )));
        }
        Ok(Self(logits))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

fn check_logits(z: &[f64]) -> Result<()> {
    if z.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "softmax needs at least 2 classes, got {}",
            z.len()
        )));
    }
    if let Some(k) = z.iter().position(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!("logit {k} is not finite")));
    }
    Ok(())
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(z: &LogitVector) -> Result<ProbabilityVector> {
    softmax_slice(z.as_slice())
}

pub(crate) fn softmax_slice(z: &[f64]) -> Result<ProbabilityVector> {
    check_logits(z)?;
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= sum);
    Ok(ProbabilityVector::from_vec_unchecked(out))
}

/// `ln softmax(z)` computed as `z - max - ln Σ exp(z - max)`.
pub(crate) fn log_softmax_slice(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - max - lse).collect()
}

/// Indicator distribution on class `y`.
pub fn one_hot(y: ClassIndex, classes: usize) -> Result<ProbabilityVector> {
    if y >= classes {
        return Err(Error::Index { index: y, classes });
    }
    let mut v = vec![0.0; classes];
    v[y] = 1.0;
    Ok(ProbabilityVector(v))
}

/// Argmax with ties going to the lowest class index.
pub fn top1(p: &ProbabilityVector) -> ClassIndex {
    argmax(p.as_slice())
}

/// Argmax of an arbitrary slice, lowest index on ties. Returns 0 for empty input.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (k, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = k;
        }
    }
    best
}

/// `ln q`, or the floor `A` once `q` drops to `e^A` or below (including `q = 0`).
pub fn clamped_log(q: f64, floor: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::InvalidInput(format!(
            "probability {q} not in [0, 1]"
        )));
    }
    check_floor(floor)?;
    Ok(clamped_log_unchecked(q, floor))
}

pub(crate) fn check_floor(floor: f64) -> Result<()> {
    if !(floor.is_finite() && floor < 0.0) {
        return Err(Error::InvalidInput(format!(
            "clamp floor must be finite and negative, got {floor}"
        )));
    }
    Ok(())
}

pub(crate) fn clamped_log_unchecked(q: f64, floor: f64) -> f64 {
    if q > floor.exp() {
        q.ln().max(floor)
    } else {
        floor
    }
}
