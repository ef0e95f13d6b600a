//! Self-training on black-box pseudo labels: the memory-calibrated loop and
//! the two baselines (vanilla and confidence-selected self-training).
//!
//! Training code only ever sees an [`UnlabeledSet`] and the black-box
//! predictions. Ground truth stays inside the [`Evaluator`], which is handed
//! the student's predictions at each evaluation point.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blackbox::{PredictionRecord, PredictionSet};
use crate::data::{LabeledDataset, UnlabeledSet};
use crate::error::{Error, Result};
use crate::eval::{Evaluator, RunTrace};
use crate::exec::Execution;
use crate::memory::{sensory_calibration, BiMemState, CalibratedBatch, FlowConfig, MemoryConfig, MemorySlot};
use crate::model::{ClassifierParams, Layout, MomentumModel};
use crate::numerics::{argmax_label, ProbVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Bimem,
    VanillaSt,
    ConfidenceSt,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Bimem => "bimem",
            Method::VanillaSt => "vanilla_st",
            Method::ConfidenceSt => "confidence_st",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bimem" => Ok(Method::Bimem),
            "vanilla_st" => Ok(Method::VanillaSt),
            "confidence_st" => Ok(Method::ConfidenceSt),
            other => Err(Error::Config(format!(
                "unknown method {other:?} (expected bimem, vanilla_st or confidence_st)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptConfig {
    pub method: Method,
    pub iterations: usize,
    /// Samples per training batch (K).
    pub batch_size: usize,
    pub lr: f64,
    /// Momentum-model EMA coefficient.
    pub gamma: f64,
    /// Weight on the old long-term centroid.
    pub gamma_prime: f64,
    /// Hard samples moved to the queue per step (N).
    pub top_n: usize,
    /// Short-term queue capacity (M).
    pub queue_capacity: usize,
    pub flows: FlowConfig,
    /// Hidden width of the target model; 0 for a linear model.
    pub hidden: usize,
    /// Leading iterations that fill the memories but train on the black-box
    /// labels, with every backward flow off.
    pub warmup_iterations: usize,
    /// Iterations between pseudo-label regenerations for the baselines.
    pub refresh_interval: usize,
    /// Fraction of each predicted class kept by confidence selection.
    pub confidence_quantile: f64,
    pub eval_interval: usize,
    pub seed: u64,
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if self.top_n == 0 || self.top_n > self.batch_size || self.batch_size > self.queue_capacity {
            return fail(format!(
                "need 1 <= top_n ({}) <= batch_size ({}) <= queue_capacity ({})",
                self.top_n, self.batch_size, self.queue_capacity
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr {} must be positive", self.lr));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return fail(format!("gamma {} outside [0, 1)", self.gamma));
        }
        if !(0.0..1.0).contains(&self.gamma_prime) {
            return fail(format!("gamma_prime {} outside [0, 1)", self.gamma_prime));
        }
        if !(0.0..=1.0).contains(&self.confidence_quantile) {
            return fail(format!("confidence_quantile {} outside [0, 1]", self.confidence_quantile));
        }
        if self.refresh_interval == 0 || self.eval_interval == 0 {
            return fail("refresh_interval and eval_interval must be positive".into());
        }
        Ok(())
    }
}

/// Shuffled passes over the sample indices; every index appears exactly once
/// per epoch and the last batch of an epoch may be short.
#[derive(Debug, Clone)]
pub struct EpochSampler {
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
    rng: ChaCha8Rng,
}

impl EpochSampler {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(4);
        Self {
            order: (0..n).collect(),
            pos: n,
            batch_size,
            rng,
        }
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.pos >= self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let batch = self.order[self.pos..end].to_vec();
        self.pos = end;
        batch
    }
}

/// Student initialization for an adaptation run.
pub fn init_student(dim: usize, classes: usize, cfg: &AdaptConfig) -> Result<ClassifierParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(5);
    Ok(ClassifierParams::init(Layout::new(dim, cfg.hidden, classes)?, &mut rng))
}

/// Reorders `preds` to follow `ids`, failing on any missing id.
pub fn align_predictions(ids: &[u64], preds: &PredictionSet) -> Result<PredictionSet> {
    let by_id: std::collections::HashMap<u64, &PredictionRecord> = preds.records().iter().map(|r| (r.id, r)).collect();
    let records = ids
        .iter()
        .map(|id| {
            by_id
                .get(id)
                .map(|r| (*r).clone())
                .ok_or_else(|| Error::data("predictions", None, format!("no prediction for target id {id}")))
        })
        .collect::<Result<Vec<_>>>()?;
    PredictionSet::new(records)
}

/// Denoised label: argmax of the elementwise product of the memory
/// distribution and the black-box distribution. Falls back to the black-box
/// label if the product vanishes.
pub fn denoise_label(memory: &ProbVector, blackbox: &ProbVector) -> usize {
    let product: Vec<f64> = memory.as_slice().iter().zip(blackbox.as_slice()).map(|(a, b)| a * b).collect();
    if product.iter().all(|v| *v == 0.0) {
        return blackbox.argmax();
    }
    argmax_label(&product).expect("nonempty product")
}

/// Everything a step observer can inspect after one memory-calibrated iteration.
pub struct StepRecord<'a> {
    pub iter: usize,
    pub batch: &'a [usize],
    pub memory: &'a BiMemState,
    pub calibrated: &'a CalibratedBatch,
    pub labels: &'a [usize],
    pub student: &'a ClassifierParams,
    pub momentum: &'a MomentumModel,
}

/// Called at each evaluation point with the student's predictions on every
/// target sample and the current pseudo labels (`None` = unlabeled).
pub type EvalHook<'a> = dyn FnMut(usize, &[usize], Option<&[Option<usize>]>) -> Result<()> + 'a;

fn predict_all(model: &ClassifierParams, inputs: &UnlabeledSet, exec: Execution) -> Result<Vec<usize>> {
    exec.try_map(&inputs.features, |x| model.predict(x))
}

fn is_eval_point(iter: usize, cfg: &AdaptConfig) -> bool {
    iter % cfg.eval_interval == 0 || iter == cfg.iterations
}

/// Flows in effect at `iter`: the backward flows stay off through the warm-up.
fn active_flows(iter: usize, cfg: &AdaptConfig) -> FlowConfig {
    if iter > cfg.warmup_iterations {
        return cfg.flows;
    }
    FlowConfig {
        sm_from_st: false,
        sm_from_lt: false,
        st_from_lt: false,
        ..cfg.flows
    }
}

/// The memory-calibrated self-training loop over unlabeled target data.
pub fn bimem_loop(
    inputs: &UnlabeledSet,
    preds: &PredictionSet,
    cfg: &AdaptConfig,
    exec: Execution,
    eval: &mut EvalHook<'_>,
    observer: &mut dyn FnMut(&StepRecord<'_>),
) -> Result<ClassifierParams> {
    cfg.validate()?;
    let n = inputs.features.len();
    if n == 0 || preds.len() != n {
        return Err(Error::invalid("target set is empty or predictions do not cover it"));
    }
    let classes = preds.classes();
    let dim = inputs.features[0].len();
    let mut student = init_student(dim, classes, cfg)?;
    let mut momentum = MomentumModel::new(&student, cfg.gamma)?;
    let mut memory = BiMemState::new(MemoryConfig {
        classes,
        dim: student.layout().feature_dim(),
        top_n: cfg.top_n,
        queue_capacity: cfg.queue_capacity,
        gamma_prime: cfg.gamma_prime,
    })?;
    let mut sampler = EpochSampler::new(n, cfg.batch_size, cfg.seed);
    let blackbox: Vec<&ProbVector> = preds.records().iter().map(|r| &r.probs).collect();

    let evaluate = |iter: usize,
                    flows: &FlowConfig,
                    student: &ClassifierParams,
                    momentum: &MomentumModel,
                    memory: &BiMemState,
                    eval: &mut EvalHook<'_>|
     -> Result<()> {
        let predicted = predict_all(student, inputs, exec)?;
        let st_centroids = memory.short_term_centroids()?;
        let idx: Vec<usize> = (0..n).collect();
        let labels = exec.try_map(&idx, |&i| {
            let (feature, _) = momentum.params.forward(&inputs.features[i])?;
            let factor = if flows.any_sensory_calibration() {
                sensory_calibration(&feature, &memory.long_term, &st_centroids, flows)?
            } else {
                None
            };
            Ok::<_, Error>(Some(match factor {
                Some(p) => denoise_label(&p, blackbox[i]),
                None => blackbox[i].argmax(),
            }))
        })?;
        eval(iter, &predicted, Some(&labels))
    };

    evaluate(0, &active_flows(0, cfg), &student, &momentum, &memory, eval)?;
    for iter in 1..=cfg.iterations {
        momentum.update(&student)?;
        let batch = sampler.next_batch();
        let slots = batch
            .iter()
            .map(|&i| {
                let (feature, prob) = momentum.params.forward(&inputs.features[i])?;
                Ok(MemorySlot {
                    sample_id: inputs.ids[i],
                    feature,
                    prob,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let flows = active_flows(iter, cfg);
        let calibrated = memory.step(slots, &flows)?;
        let labels: Vec<usize> = batch
            .iter()
            .zip(calibrated.probs.iter().zip(&calibrated.calibrated))
            .map(|(&i, (p, &done))| if done { denoise_label(p, blackbox[i]) } else { blackbox[i].argmax() })
            .collect();
        let xs: Vec<&[f64]> = batch.iter().map(|&i| inputs.features[i].as_slice()).collect();
        student.sgd_step(&xs, &labels, cfg.lr)?;
        observer(&StepRecord {
            iter,
            batch: &batch,
            memory: &memory,
            calibrated: &calibrated,
            labels: &labels,
            student: &student,
            momentum: &momentum,
        });
        if is_eval_point(iter, cfg) {
            evaluate(iter, &flows, &student, &momentum, &memory, eval)?;
        }
    }
    Ok(student)
}

/// Keeps the `ceil(q * n_c)` most confident samples of each predicted class.
pub fn confidence_select(probs: &[ProbVector], quantile: f64) -> Vec<Option<usize>> {
    let classes = probs.first().map_or(0, |p| p.len());
    let mut out = vec![None; probs.len()];
    for c in 0..classes {
        let mut members: Vec<usize> = (0..probs.len()).filter(|&i| probs[i].argmax() == c).collect();
        members.sort_by(|&a, &b| probs[b].as_slice()[c].total_cmp(&probs[a].as_slice()[c]).then(a.cmp(&b)));
        let keep = (quantile * members.len() as f64).ceil() as usize;
        for &i in members.iter().take(keep) {
            out[i] = Some(c);
        }
    }
    out
}

/// Vanilla or confidence-selected self-training: labels start from the black
/// box and are regenerated from the momentum model every `refresh_interval`
/// iterations. `quantile = None` keeps every label.
pub fn self_training_loop(
    inputs: &UnlabeledSet,
    preds: &PredictionSet,
    cfg: &AdaptConfig,
    quantile: Option<f64>,
    exec: Execution,
    eval: &mut EvalHook<'_>,
) -> Result<ClassifierParams> {
    cfg.validate()?;
    let n = inputs.features.len();
    if n == 0 || preds.len() != n {
        return Err(Error::invalid("target set is empty or predictions do not cover it"));
    }
    let dim = inputs.features[0].len();
    let mut student = init_student(dim, preds.classes(), cfg)?;
    let mut momentum = MomentumModel::new(&student, cfg.gamma)?;
    let mut sampler = EpochSampler::new(n, cfg.batch_size, cfg.seed);

    let select = |probs: &[ProbVector]| match quantile {
        Some(q) => confidence_select(probs, q),
        None => probs.iter().map(|p| Some(p.argmax())).collect(),
    };
    let blackbox: Vec<ProbVector> = preds.records().iter().map(|r| r.probs.clone()).collect();
    let mut labels = select(&blackbox);

    eval(0, &predict_all(&student, inputs, exec)?, Some(&labels))?;
    for iter in 1..=cfg.iterations {
        momentum.update(&student)?;
        let batch = sampler.next_batch();
        let (xs, ys): (Vec<&[f64]>, Vec<usize>) = batch
            .iter()
            .filter_map(|&i| labels[i].map(|y| (inputs.features[i].as_slice(), y)))
            .unzip();
        student.sgd_step(&xs, &ys, cfg.lr)?;
        if iter % cfg.refresh_interval == 0 {
            let probs = exec.try_map(&inputs.features, |x| momentum.params.forward(x).map(|(_, p)| p))?;
            labels = select(&probs);
        }
        if is_eval_point(iter, cfg) {
            eval(iter, &predict_all(&student, inputs, exec)?, Some(&labels))?;
        }
    }
    Ok(student)
}

/// Runs the configured method against a labeled target set, using the labels
/// only for the trace.
pub fn run_adaptation(
    target: &LabeledDataset,
    preds: &PredictionSet,
    cfg: &AdaptConfig,
    exec: Execution,
) -> Result<(ClassifierParams, RunTrace)> {
    run_adaptation_observed(target, preds, cfg, exec, &mut |_| {})
}

pub fn run_adaptation_observed(
    target: &LabeledDataset,
    preds: &PredictionSet,
    cfg: &AdaptConfig,
    exec: Execution,
    observer: &mut dyn FnMut(&StepRecord<'_>),
) -> Result<(ClassifierParams, RunTrace)> {
    cfg.validate()?;
    let preds = align_predictions(target.ids(), preds)?;
    if target.classes() > preds.classes() {
        return Err(Error::invalid("target labels exceed the predicted class count"));
    }
    let evaluator = Evaluator::new(target, &preds)?;
    let inputs = target.without_labels();
    let mut trace = RunTrace::default();
    let mut hook = |iter: usize, predicted: &[usize], labels: Option<&[Option<usize>]>| {
        trace.push(evaluator.point(iter, predicted, labels)?)
    };
    let params = match cfg.method {
        Method::Bimem => bimem_loop(&inputs, &preds, cfg, exec, &mut hook, observer)?,
        Method::VanillaSt => self_training_loop(&inputs, &preds, cfg, None, exec, &mut hook)?,
        Method::ConfidenceSt => {
            self_training_loop(&inputs, &preds, cfg, Some(cfg.confidence_quantile), exec, &mut hook)?
        }
    };
    Ok((params, trace))
}

pub fn run_bimem(target: &LabeledDataset, preds: &PredictionSet, cfg: &AdaptConfig) -> Result<(ClassifierParams, RunTrace)> {
    check_method(cfg, Method::Bimem)?;
    run_adaptation(target, preds, cfg, Execution::default())
}

pub fn run_vanilla_st(
    target: &LabeledDataset,
    preds: &PredictionSet,
    cfg: &AdaptConfig,
) -> Result<(ClassifierParams, RunTrace)> {
    check_method(cfg, Method::VanillaSt)?;
    run_adaptation(target, preds, cfg, Execution::default())
}

pub fn run_confidence_st(
    target: &LabeledDataset,
    preds: &PredictionSet,
    cfg: &AdaptConfig,
) -> Result<(ClassifierParams, RunTrace)> {
    check_method(cfg, Method::ConfidenceSt)?;
    run_adaptation(target, preds, cfg, Execution::default())
}

fn check_method(cfg: &AdaptConfig, expected: Method) -> Result<()> {
    if cfg.method != expected {
        return Err(Error::Config(format!("config method is {}, expected {expected}", cfg.method)));
    }
    Ok(())
}

/// Runs `cfg` once per seed (in parallel when enabled); traces come back in seed order.
pub fn run_seeds(
    target: &LabeledDataset,
    preds: &PredictionSet,
    cfg: &AdaptConfig,
    seeds: &[u64],
    exec: Execution,
) -> Result<Vec<RunTrace>> {
    exec.try_map(seeds, |&seed| {
        let cfg = AdaptConfig { seed, ..cfg.clone() };
        // Each run is sequential inside; parallelism is across runs.
        run_adaptation(target, preds, &cfg, Execution::Sequential).map(|(_, t)| t)
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    /// 1-based row number.
    pub row: usize,
    pub flows: FlowConfig,
    pub final_accs: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation (0 for a single seed).
    pub std: f64,
}

pub const ABLATION_HEADER: &str =
    "row,flows,sm_to_st,sm_to_lt,st_to_lt,sm_from_st,sm_from_lt,st_from_lt,mean_final_acc,std_final_acc,seeds";

impl AblationRow {
    pub fn csv_line(&self) -> String {
        let f = self.flows;
        let b = |v: bool| u8::from(v).to_string();
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.row,
            f,
            b(f.sm_to_st),
            b(f.sm_to_lt),
            b(f.st_to_lt),
            b(f.sm_from_st),
            b(f.sm_from_lt),
            b(f.st_from_lt),
            crate::data::fmt_sig9(self.mean),
            crate::data::fmt_sig9(self.std),
            self.final_accs.len()
        )
    }
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

/// Every ablation row crossed with every seed; the grid cells are independent runs.
pub fn run_ablation_suite(
    target: &LabeledDataset,
    preds: &PredictionSet,
    base: &AdaptConfig,
    seeds: &[u64],
    exec: Execution,
) -> Result<Vec<AblationRow>> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let cells: Vec<(usize, u64)> = (0..FlowConfig::ABLATION_ROWS.len())
        .flat_map(|r| seeds.iter().map(move |&s| (r, s)))
        .collect();
    let finals = exec.try_map(&cells, |&(r, seed)| {
        let cfg = AdaptConfig {
            method: Method::Bimem,
            flows: FlowConfig::ABLATION_ROWS[r],
            seed,
            ..base.clone()
        };
        let (_, trace) = run_adaptation(target, preds, &cfg, Execution::Sequential)?;
        Ok::<_, Error>(trace.last().expect("trace has an initial point").acc_all)
    })?;
    Ok(FlowConfig::ABLATION_ROWS
        .iter()
        .enumerate()
        .map(|(r, flows)| {
            let final_accs = finals[r * seeds.len()..(r + 1) * seeds.len()].to_vec();
            let (mean, std) = mean_std(&final_accs);
            AblationRow {
                row: r + 1,
                flows: *flows,
                final_accs,
                mean,
                std,
            }
        })
        .collect())
}
