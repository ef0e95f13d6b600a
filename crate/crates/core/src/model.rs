//! The target classifier, its momentum (EMA) copy, the task loss and SGD.
//!
//! The classifier is a single tanh hidden layer followed by a softmax output,
//! or a plain softmax regression when `hidden == 0`. Its "feature" is the hidden
//! activation (or the input itself for the linear model). Parameters live in
//! one flat vector so that EMA updates and gradient checks are plain loops.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{softmax, FeatureVector, ProbVector, PROB_FLOOR};

/// Half-width of the uniform initialization interval.
pub const INIT_SCALE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub input: usize,
    /// Hidden width; 0 means a linear model.
    pub hidden: usize,
    pub classes: usize,
}

impl Layout {
    pub fn new(input: usize, hidden: usize, classes: usize) -> Result<Self> {
        if input == 0 || classes == 0 {
            return Err(Error::invalid("layout needs positive input dimension and class count"));
        }
        Ok(Self { input, hidden, classes })
    }

    /// Width of the feature handed to the output layer.
    pub fn feature_dim(&self) -> usize {
        if self.hidden > 0 {
            self.hidden
        } else {
            self.input
        }
    }

    pub fn num_params(&self) -> usize {
        let head = self.classes * self.feature_dim() + self.classes;
        if self.hidden > 0 {
            self.hidden * self.input + self.hidden + head
        } else {
            head
        }
    }

    // Offsets into the flat parameter vector: [w1 | b1 | w2 | b2].
    fn w1(&self) -> usize {
        0
    }
    fn b1(&self) -> usize {
        self.hidden * self.input
    }
    fn w2(&self) -> usize {
        self.b1() + self.hidden
    }
    fn b2(&self) -> usize {
        self.w2() + self.classes * self.feature_dim()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierParams {
    layout: Layout,
    values: Vec<f64>,
}

impl ClassifierParams {
    pub fn zeros(layout: Layout) -> Self {
        Self {
            layout,
            values: vec![0.0; layout.num_params()],
        }
    }

    /// Every parameter drawn uniformly from `[-INIT_SCALE, INIT_SCALE]`.
    pub fn init(layout: Layout, rng: &mut ChaCha8Rng) -> Self {
        let values = (0..layout.num_params())
            .map(|_| rng.random_range(-INIT_SCALE..=INIT_SCALE))
            .collect();
        Self { layout, values }
    }

    pub fn init_seeded(layout: Layout, seed: u64) -> Self {
        Self::init(layout, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn from_values(layout: Layout, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.num_params() {
            return Err(Error::invalid(format!(
                "expected {} parameters, got {}",
                layout.num_params(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericFailure("non-finite parameter".into()));
        }
        Ok(Self { layout, values })
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.layout.input {
            return Err(Error::invalid(format!(
                "input has dimension {}, model expects {}",
                x.len(),
                self.layout.input
            )));
        }
        Ok(())
    }

    fn feature_unchecked(&self, x: &[f64]) -> FeatureVector {
        let l = self.layout;
        if l.hidden == 0 {
            return x.to_vec();
        }
        let w1 = &self.values[l.w1()..l.b1()];
        let b1 = &self.values[l.b1()..l.w2()];
        (0..l.hidden)
            .map(|j| {
                let row = &w1[j * l.input..(j + 1) * l.input];
                (b1[j] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()).tanh()
            })
            .collect()
    }

    fn logits_from_feature(&self, h: &[f64]) -> Vec<f64> {
        let l = self.layout;
        let fd = l.feature_dim();
        let w2 = &self.values[l.w2()..l.b2()];
        let b2 = &self.values[l.b2()..];
        (0..l.classes)
            .map(|c| b2[c] + w2[c * fd..(c + 1) * fd].iter().zip(h).map(|(w, v)| w * v).sum::<f64>())
            .collect()
    }

    /// Feature and class probabilities for one input.
    pub fn forward(&self, x: &[f64]) -> Result<(FeatureVector, ProbVector)> {
        self.check_input(x)?;
        let h = self.feature_unchecked(x);
        let p = softmax(&self.logits_from_feature(&h)).map_err(|_| Error::NumericFailure("non-finite logits".into()))?;
        Ok((h, p))
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        self.forward(x).map(|(_, p)| p.argmax())
    }

    /// Mean cross-entropy over the batch and its gradient w.r.t. every parameter.
    pub fn loss_and_gradient(&self, xs: &[&[f64]], labels: &[usize]) -> Result<(f64, Vec<f64>)> {
        if xs.len() != labels.len() {
            return Err(Error::invalid("inputs and labels differ in length"));
        }
        let l = self.layout;
        let fd = l.feature_dim();
        let mut grad = vec![0.0; self.values.len()];
        let mut loss = 0.0;
        if xs.is_empty() {
            return Ok((loss, grad));
        }
        let w2 = &self.values[l.w2()..l.b2()];
        for (x, &y) in xs.iter().zip(labels) {
            self.check_input(x)?;
            let (h, p) = self.forward(x)?;
            loss += cross_entropy_loss(&p, y)?;
            // d loss / d logits = p - onehot(y)
            let mut dz = p.into_inner();
            dz[y] -= 1.0;
            for c in 0..l.classes {
                let base = l.w2() + c * fd;
                for (g, hv) in grad[base..base + fd].iter_mut().zip(&h) {
                    *g += dz[c] * hv;
                }
                grad[l.b2() + c] += dz[c];
            }
            if l.hidden > 0 {
                for j in 0..l.hidden {
                    let dh: f64 = (0..l.classes).map(|c| w2[c * fd + j] * dz[c]).sum();
                    let da = dh * (1.0 - h[j] * h[j]);
                    let base = l.w1() + j * l.input;
                    for (g, xv) in grad[base..base + l.input].iter_mut().zip(x.iter()) {
                        *g += da * xv;
                    }
                    grad[l.b1() + j] += da;
                }
            }
        }
        let n = xs.len() as f64;
        grad.iter_mut().for_each(|g| *g /= n);
        Ok((loss / n, grad))
    }

    /// One plain gradient-descent step on the mean cross-entropy of the batch.
    /// An empty batch leaves the parameters untouched.
    pub fn sgd_step(&mut self, xs: &[&[f64]], labels: &[usize], lr: f64) -> Result<f64> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate {lr} must be finite and nonnegative")));
        }
        let (loss, grad) = self.loss_and_gradient(xs, labels)?;
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NumericFailure("non-finite gradient".into()));
        }
        for (p, g) in self.values.iter_mut().zip(&grad) {
            *p -= lr * g;
        }
        Ok(loss)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let raw: ClassifierParams = serde_json::from_str(&text)?;
        Self::from_values(raw.layout, raw.values)
    }
}

/// `-ln p[label]` with the probability floored at [`PROB_FLOOR`].
pub fn cross_entropy_loss(prob: &ProbVector, label: usize) -> Result<f64> {
    let p = prob
        .as_slice()
        .get(label)
        .ok_or_else(|| Error::invalid(format!("label {label} out of range for {} classes", prob.len())))?;
    Ok(-p.max(PROB_FLOOR).ln())
}

/// Exponential moving average of a student's parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentumModel {
    pub params: ClassifierParams,
    gamma: f64,
}

impl MomentumModel {
    /// Starts as an exact copy of `student`.
    pub fn new(student: &ClassifierParams, gamma: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::invalid(format!("momentum {gamma} outside [0, 1)")));
        }
        Ok(Self {
            params: student.clone(),
            gamma,
        })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// `p_m <- gamma * p_m + (1 - gamma) * p`
    pub fn update(&mut self, student: &ClassifierParams) -> Result<()> {
        if student.layout != self.params.layout {
            return Err(Error::invalid("momentum model and student layouts differ"));
        }
        let g = self.gamma;
        for (m, s) in self.params.values.iter_mut().zip(&student.values) {
            *m = g * *m + (1.0 - g) * s;
        }
        Ok(())
    }
}
