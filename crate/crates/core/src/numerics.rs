//! Vector arithmetic shared by the memories, the model and the evaluation code.
//!
//! Everything is `f64`. Ties are always broken towards the lowest index so that
//! every trajectory built on top of these functions is deterministic.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default equality tolerance for floating point comparisons.
pub const EQ_TOL: f64 = 1e-9;
/// Allowed deviation of a probability vector's sum from 1.
pub const PROB_SUM_TOL: f64 = 1e-6;
/// Floor applied to probabilities before taking logarithms in the loss.
pub const PROB_FLOOR: f64 = 1e-12;

/// A point in feature space. Dimension is fixed within one experiment.
pub type FeatureVector = Vec<f64>;

/// A categorical distribution over `C` classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("probability vector must be nonempty"));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::invalid(format!(
                "probability entries must be finite and nonnegative, got {bad}"
            )));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > PROB_SUM_TOL {
            return Err(Error::invalid(format!(
                "probability vector sums to {sum}, expected 1"
            )));
        }
        Ok(ProbVector(values))
    }

    pub fn uniform(classes: usize) -> Self {
        assert!(classes > 0, "uniform distribution needs at least one class");
        ProbVector(vec![1.0 / classes as f64; classes])
    }

    /// One-hot vector with `eps` mass spread uniformly over all classes.
    pub fn smoothed_one_hot(classes: usize, label: usize, eps: f64) -> Result<Self> {
        if label >= classes {
            return Err(Error::invalid(format!("label {label} out of range for {classes} classes")));
        }
        if !(0.0..=1.0).contains(&eps) {
            return Err(Error::invalid(format!("smoothing {eps} outside [0, 1]")));
        }
        let mut v = vec![eps / classes as f64; classes];
        v[label] += 1.0 - eps;
        Ok(ProbVector(v))
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

    pub fn argmax(&self) -> usize {
        argmax_label(&self.0).expect("probability vectors are nonempty")
    }
}

impl TryFrom<Vec<f64>> for ProbVector {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        ProbVector::new(values)
    }
}

impl From<ProbVector> for Vec<f64> {
    fn from(p: ProbVector) -> Self {
        p.0
    }
}

impl AsRef<[f64]> for ProbVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(scores: &[f64]) -> Result<ProbVector> {
    if scores.is_empty() {
        return Err(Error::invalid("softmax of an empty score vector"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::invalid("softmax scores must be finite"));
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(ProbVector(exps.into_iter().map(|e| e / total).collect()))
}

/// Shannon entropy in nats with the `0 log 0 = 0` convention.
pub fn entropy(p: &ProbVector) -> f64 {
    -p.0.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * v.ln())
        .sum::<f64>()
}

pub fn l1_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "dimension mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum())
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax_label(values: &[f64]) -> Result<usize> {
    if values.is_empty() {
        return Err(Error::invalid("argmax of an empty vector"));
    }
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Elementwise product `w ⊗ p`, rescaled to sum to one.
///
/// Returns [`Error::DegenerateCalibration`] when every product is zero; callers
/// decide how to recover (the memories fall back to the uniform vector).
pub fn reweight_normalize(p: &ProbVector, w: &[f64]) -> Result<ProbVector> {
    if w.len() != p.len() {
        return Err(Error::invalid(format!(
            "weight length {} does not match {} classes",
            w.len(),
            p.len()
        )));
    }
    if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(Error::invalid("weights must be finite and nonnegative"));
    }
    let product: Vec<f64> = p.0.iter().zip(w).map(|(a, b)| a * b).collect();
    let total: f64 = product.iter().sum();
    if total <= 0.0 {
        return Err(Error::DegenerateCalibration);
    }
    Ok(ProbVector(product.into_iter().map(|v| v / total).collect()))
}
