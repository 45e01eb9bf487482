//! Points on the probability simplex.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Absolute tolerance on the simplex sum.
pub const SIMPLEX_TOLERANCE: f64 = 1e-9;

/// A probability vector over `L >= 2` classes.
///
/// Entries lie in `[0, 1]` and sum to one within [`SIMPLEX_TOLERANCE`].
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    /// Validates `values` as a point on the simplex.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::InvalidDistribution(format!(
                "need at least 2 classes, got {}",
                values.len()
            )));
        }
        let mut sum = 0.0;
        for (i, &v) in values.iter().enumerate() {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidDistribution(format!(
                    "entry {i} = {v} outside [0, 1]"
                )));
            }
            sum += v;
        }
        if (sum - 1.0).abs() > SIMPLEX_TOLERANCE {
            return Err(Error::InvalidDistribution(format!(
                "entries sum to {sum}, not 1"
            )));
        }
        Ok(ProbVector(values))
    }

    /// Divides nonnegative weights by their sum.
    pub fn normalize(raw: &[f64]) -> Result<Self> {
        if raw.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidDistribution(
                "weights must be finite and nonnegative".into(),
            ));
        }
        let sum: f64 = raw.iter().sum();
        if sum <= 0.0 {
            return Err(Error::InvalidDistribution("weights sum to zero".into()));
        }
        ProbVector::new(raw.iter().map(|v| v / sum).collect())
    }

    /// Softmax of unnormalized log-weights, computed stably.
    pub fn from_log_weights(logits: &[f64]) -> Result<Self> {
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::InvalidDistribution(
                "log-weights must contain a finite maximum".into(),
            ));
        }
        let raw: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        ProbVector::normalize(&raw)
    }

    /// Uniform distribution over `num_classes`.
    pub fn uniform(num_classes: usize) -> Result<Self> {
        ProbVector::normalize(&vec![1.0; num_classes])
    }

    pub fn num_classes(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn get(&self, class: usize) -> f64 {
        self.0[class]
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Index of the largest entry; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.0.iter().enumerate().skip(1) {
            if v > self.0[best] {
                best = i;
            }
        }
        best
    }

    /// Largest entry.
    pub fn max_prob(&self) -> f64 {
        self.0[self.argmax()]
    }

    /// Shannon entropy in nats, with `0 ln 0 = 0`.
    pub fn entropy(&self) -> f64 {
        let h: f64 = self
            .0
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| -p * p.ln())
            .sum();
        h.max(0.0)
    }
}

impl<'de> Deserialize<'de> for ProbVector {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let values = Vec::<f64>::deserialize(d)?;
        ProbVector::new(values).map_err(serde::de::Error::custom)
    }
}

/// Index of the maximum entry of `p`, lowest index on ties.
pub fn argmax_label(p: &ProbVector) -> usize {
    p.argmax()
}

/// Natural-log entropy of `p`.
pub fn entropy(p: &ProbVector) -> f64 {
    p.entropy()
}

/// Normalizes nonnegative weights onto the simplex.
pub fn normalize(raw: &[f64]) -> Result<ProbVector> {
    ProbVector::normalize(raw)
}
