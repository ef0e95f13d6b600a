//! Flat JSON experiment configuration. Every key has a default; unknown keys
//! are rejected so that a typo never silently falls back to a default.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapt::{AdaptConfig, Method};
use crate::blackbox::SourceTraining;
use crate::data::GenConfig;
use crate::error::{Error, Result};
use crate::memory::FlowConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    /// Single source of randomness for every stage.
    pub seed: u64,

    // Synthetic benchmark.
    pub classes: usize,
    pub dim: usize,
    pub n_per_class: usize,
    pub class_separation: f64,
    pub noise_sigma: f64,
    /// Length of the default target shift, applied along the diagonal of the
    /// first two coordinates. Ignored when `target_shift` is given.
    pub shift_magnitude: f64,
    pub target_shift: Option<Vec<f64>>,
    pub target_rotation_deg: f64,

    // Black-box source model.
    pub source_hidden: usize,
    pub source_epochs: usize,
    pub source_lr: f64,
    pub source_batch_size: usize,

    // Adaptation.
    pub method: Method,
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub gamma: f64,
    pub gamma_prime: f64,
    /// Defaults to `batch_size`.
    pub top_n: Option<usize>,
    pub queue_capacity: usize,
    pub hidden: usize,
    /// Defaults to the refresh interval.
    pub warmup_iterations: Option<usize>,
    /// Defaults to ten epochs over the target set.
    pub refresh_interval: Option<usize>,
    pub confidence_quantile: f64,
    pub eval_interval: usize,

    pub sm_to_st: bool,
    pub sm_to_lt: bool,
    pub st_to_lt: bool,
    pub sm_from_st: bool,
    pub sm_from_lt: bool,
    pub st_from_lt: bool,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            classes: 5,
            dim: 8,
            n_per_class: 200,
            class_separation: 4.0,
            noise_sigma: 1.0,
            shift_magnitude: 1.5,
            target_shift: None,
            target_rotation_deg: 25.0,
            source_hidden: 32,
            source_epochs: 50,
            source_lr: 0.05,
            source_batch_size: 32,
            method: Method::Bimem,
            iterations: 3000,
            batch_size: 32,
            lr: 0.05,
            gamma: 0.99,
            gamma_prime: 0.9,
            top_n: None,
            queue_capacity: 256,
            hidden: 64,
            warmup_iterations: None,
            refresh_interval: None,
            confidence_quantile: 0.5,
            eval_interval: 100,
            sm_to_st: true,
            sm_to_lt: true,
            st_to_lt: true,
            sm_from_st: true,
            sm_from_lt: true,
            st_from_lt: true,
        }
    }
}

impl Config {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a config file, or the defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
                Self::from_json(&text)
            }
        }
    }

    pub fn flows(&self) -> FlowConfig {
        FlowConfig {
            sm_to_st: self.sm_to_st,
            sm_to_lt: self.sm_to_lt,
            st_to_lt: self.st_to_lt,
            sm_from_st: self.sm_from_st,
            sm_from_lt: self.sm_from_lt,
            st_from_lt: self.st_from_lt,
        }
    }

    pub fn resolved_target_shift(&self) -> Vec<f64> {
        self.target_shift.clone().unwrap_or_else(|| {
            let mut v = vec![0.0; self.dim];
            let component = self.shift_magnitude / 2f64.sqrt();
            v.iter_mut().take(2).for_each(|x| *x = component);
            v
        })
    }

    pub fn gen_config(&self) -> GenConfig {
        GenConfig {
            classes: self.classes,
            dim: self.dim,
            n_per_class: self.n_per_class,
            class_separation: self.class_separation,
            target_shift: self.resolved_target_shift(),
            target_rotation_deg: self.target_rotation_deg,
            noise_sigma: self.noise_sigma,
            seed: self.seed,
        }
    }

    pub fn source_training(&self) -> SourceTraining {
        SourceTraining {
            hidden: self.source_hidden,
            epochs: self.source_epochs,
            lr: self.source_lr,
            batch_size: self.source_batch_size,
            seed: self.seed,
        }
    }

    pub fn top_n(&self) -> usize {
        self.top_n.unwrap_or(self.batch_size)
    }

    pub fn refresh_interval(&self, n_target: usize) -> usize {
        self.refresh_interval
            .unwrap_or_else(|| 10 * n_target.div_ceil(self.batch_size.max(1)).max(1))
    }

    pub fn warmup_iterations(&self, n_target: usize) -> usize {
        self.warmup_iterations.unwrap_or_else(|| self.refresh_interval(n_target))
    }

    pub fn adapt_config(&self, n_target: usize) -> AdaptConfig {
        AdaptConfig {
            method: self.method,
            iterations: self.iterations,
            batch_size: self.batch_size,
            lr: self.lr,
            gamma: self.gamma,
            gamma_prime: self.gamma_prime,
            top_n: self.top_n(),
            queue_capacity: self.queue_capacity,
            flows: self.flows(),
            hidden: self.hidden,
            warmup_iterations: self.warmup_iterations(n_target),
            refresh_interval: self.refresh_interval(n_target),
            confidence_quantile: self.confidence_quantile,
            eval_interval: self.eval_interval,
            seed: self.seed,
        }
    }

    /// Copy with every derived default filled in, for printing before a run.
    pub fn resolved(&self, n_target: Option<usize>) -> Self {
        Self {
            target_shift: Some(self.resolved_target_shift()),
            top_n: Some(self.top_n()),
            refresh_interval: n_target.map(|n| self.refresh_interval(n)).or(self.refresh_interval),
            warmup_iterations: n_target.map(|n| self.warmup_iterations(n)).or(self.warmup_iterations),
            ..self.clone()
        }
    }

    pub fn to_pretty_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
