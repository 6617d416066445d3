//! Cross entropy, class-balanced cross entropy, reverse cross entropy and
//! their symmetric combinations, with gradients with respect to logits.
//!
//! With `p = softmax(z)`, target `q`, class weights `w` and `c(k)` the
//! clamped log of `q(k)`:
//!
//! | kind | value |
//! |------|-------|
//! | CE   | `-Σ q(k) ln p(k)` |
//! | BCE  | `-Σ w(k) q(k) ln p(k)` |
//! | RCE  | `-Σ p(k) c(k)` |
//! | SCE  | `α·CE + β·RCE` |
//! | BSCE | `α·BCE + β·RCE` |
//!
//! Targets are data: no gradient flows into `q`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::prob::{
    check_floor, clamped_log_unchecked, log_softmax_slice, softmax_slice, LogitVector,
    ProbabilityVector, DEFAULT_CLAMP_FLOOR,
};
use crate::{Error, Result};

pub const DEFAULT_ALPHA: f64 = 0.4;
pub const DEFAULT_BETA: f64 = 0.7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Ce,
    Bce,
    Rce,
    Sce,
    Bsce,
}

impl LossKind {
    pub const ALL: [LossKind; 5] = [
        LossKind::Ce,
        LossKind::Bce,
        LossKind::Rce,
        LossKind::Sce,
        LossKind::Bsce,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Ce => "ce",
            LossKind::Bce => "bce",
            LossKind::Rce => "rce",
            LossKind::Sce => "sce",
            LossKind::Bsce => "bsce",
        }
    }

    /// Whether the loss reads the class-balancing weights.
    pub fn uses_class_weights(self) -> bool {
        matches!(self, LossKind::Bce | LossKind::Bsce)
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown loss kind {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub kind: LossKind,
    pub alpha: f64,
    pub beta: f64,
    /// Value substituted for `ln q` once `q <= e^clamp_floor`.
    pub clamp_floor: f64,
}

impl LossConfig {
    pub fn new(kind: LossKind) -> Self {
        Self {
            kind,
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            clamp_floor: DEFAULT_CLAMP_FLOOR,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        if !(self.clamp_floor.is_finite() && self.clamp_floor < 0.0) {
            return Err(Error::Config(format!(
                "clamp_floor must be finite and < 0, got {}",
                self.clamp_floor
            )));
        }
        if matches!(self.kind, LossKind::Sce | LossKind::Bsce) && self.alpha + self.beta <= 0.0 {
            return Err(Error::Config(format!(
                "{} needs alpha + beta > 0",
                self.kind
            )));
        }
        Ok(())
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        Self::new(LossKind::Bsce)
    }
}

/// Per-class balancing factors `w(k) = N / (K · n(k))`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassWeights {
    weights: Vec<f64>,
    counts: Vec<u64>,
    total: u64,
}

impl ClassWeights {
    /// All-ones weights, i.e. the weights of a perfectly balanced split.
    pub fn balanced(classes: usize) -> Result<Self> {
        class_weights(&vec![1; classes])
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// `w(k)` as a reduced fraction `(numerator, denominator)`.
    pub fn weight_fraction(&self, k: usize) -> (u128, u128) {
        let num = self.total as u128;
        let den = self.weights.len() as u128 * self.counts[k] as u128;
        let g = gcd(num, den);
        (num / g, den / g)
    }
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

pub fn class_weights(counts: &[u64]) -> Result<ClassWeights> {
    if counts.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "class weights need at least 2 classes, got {}",
            counts.len()
        )));
    }
    if let Some(k) = counts.iter().position(|n| *n == 0) {
        return Err(Error::InvalidInput(format!(
            "class {k} has no samples; its weight is undefined"
        )));
    }
    let total: u64 = counts.iter().sum();
    let classes = counts.len() as f64;
    let weights = counts
        .iter()
        .map(|n| total as f64 / (classes * *n as f64))
        .collect();
    Ok(ClassWeights {
        weights,
        counts: counts.to_vec(),
        total,
    })
}

fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::Shape { expected, got });
    }
    Ok(())
}

fn weighted_ce(p: &ProbabilityVector, q: &ProbabilityVector, w: Option<&[f64]>) -> Result<f64> {
    check_len(p.len(), q.len())?;
    let mut total = 0.0;
    for k in 0..p.len() {
        let qk = q[k];
        if qk == 0.0 {
            continue;
        }
        if p[k] == 0.0 {
            return Err(Error::InfiniteLoss { class: k });
        }
        let wk = w.map_or(1.0, |w| w[k]);
        total -= wk * qk * p[k].ln();
    }
    Ok(total)
}

/// Cross entropy `-Σ q(k) ln p(k)`.
pub fn ce(p: &ProbabilityVector, q: &ProbabilityVector) -> Result<f64> {
    weighted_ce(p, q, None)
}

/// Class-balanced cross entropy `-Σ w(k) q(k) ln p(k)`.
pub fn bce(p: &ProbabilityVector, q: &ProbabilityVector, w: &ClassWeights) -> Result<f64> {
    check_len(p.len(), w.len())?;
    weighted_ce(p, q, Some(w.weights()))
}

/// Reverse cross entropy `-Σ p(k) clamped_log(q(k), floor)`.
pub fn rce(p: &ProbabilityVector, q: &ProbabilityVector, floor: f64) -> Result<f64> {
    check_len(p.len(), q.len())?;
    check_floor(floor)?;
    Ok(-p
        .as_slice()
        .iter()
        .zip(q.as_slice())
        .map(|(pk, qk)| pk * clamped_log_unchecked(*qk, floor))
        .sum::<f64>())
}

pub fn sce(
    p: &ProbabilityVector,
    q: &ProbabilityVector,
    alpha: f64,
    beta: f64,
    floor: f64,
) -> Result<f64> {
    Ok(alpha * ce(p, q)? + beta * rce(p, q, floor)?)
}

pub fn bsce(
    p: &ProbabilityVector,
    q: &ProbabilityVector,
    w: &ClassWeights,
    alpha: f64,
    beta: f64,
    floor: f64,
) -> Result<f64> {
    Ok(alpha * bce(p, q, w)? + beta * rce(p, q, floor)?)
}

/// Loss value together with its gradient with respect to the logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LossResult {
    pub value: f64,
    pub grad_logits: Vec<f64>,
}

/// Evaluates `cfg.kind` at `p = softmax(z)` and returns `dL/dz`.
///
/// `w` is only read by the balanced kinds but must have matching length.
pub fn loss_with_grad(
    cfg: &LossConfig,
    z: &LogitVector,
    q: &ProbabilityVector,
    w: &ClassWeights,
) -> Result<LossResult> {
    cfg.validate()?;
    let classes = z.len();
    check_len(classes, q.len())?;
    check_len(classes, w.len())?;
    let (value, grad_logits) = loss_with_grad_slice(cfg, z.as_slice(), q.as_slice(), w.weights())?;
    Ok(LossResult { value, grad_logits })
}

/// Slice-level worker shared with the trainer; shapes are assumed checked.
pub(crate) fn loss_with_grad_slice(
    cfg: &LossConfig,
    z: &[f64],
    q: &[f64],
    w: &[f64],
) -> Result<(f64, Vec<f64>)> {
    let p = softmax_slice(z)?;
    let p = p.as_slice();
    let log_p = log_softmax_slice(z);
    let mut grad = vec![0.0; z.len()];
    let mut value = 0.0;

    let (fwd_scale, weighted) = match cfg.kind {
        LossKind::Ce => (1.0, false),
        LossKind::Bce => (1.0, true),
        LossKind::Rce => (0.0, false),
        LossKind::Sce => (cfg.alpha, false),
        LossKind::Bsce => (cfg.alpha, true),
    };
    let rev_scale = match cfg.kind {
        LossKind::Ce | LossKind::Bce => 0.0,
        LossKind::Rce => 1.0,
        LossKind::Sce | LossKind::Bsce => cfg.beta,
    };

    if fwd_scale != 0.0 {
        // d/dz_j [-Σ w_k q_k ln p_k] = p_j Σ_k w_k q_k - w_j q_j
        let weight = |k: usize| if weighted { w[k] } else { 1.0 };
        let mut fwd = 0.0;
        let mut mass = 0.0;
        for k in 0..z.len() {
            if q[k] != 0.0 {
                fwd -= weight(k) * q[k] * log_p[k];
                mass += weight(k) * q[k];
            }
        }
        value += fwd_scale * fwd;
        for (j, g) in grad.iter_mut().enumerate() {
            *g += fwd_scale * (p[j] * mass - weight(j) * q[j]);
        }
    }

    if rev_scale != 0.0 {
        // c_k is constant in z; d/dz_j [-Σ p_k c_k] = p_j (Σ_k p_k c_k - c_j)
        let c: Vec<f64> = q
            .iter()
            .map(|qk| clamped_log_unchecked(*qk, cfg.clamp_floor))
            .collect();
        let expected: f64 = p.iter().zip(&c).map(|(pk, ck)| pk * ck).sum();
        value += rev_scale * -expected;
        for (j, g) in grad.iter_mut().enumerate() {
            *g += rev_scale * p[j] * (expected - c[j]);
        }
    }

    Ok((value, grad))
}
