//! Sensory, short-term and long-term memories and the flows between them.
//!
//! One call to [`BiMemState::step`] runs a full forward memorization pass
//! (sensory refresh, active selection into the FIFO queue, consolidation of
//! everything evicted into the long-term centroids) followed by backward
//! calibration (long-term corrects short-term, then both correct sensory).

use std::collections::VecDeque;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{argmax_label, entropy, l1_distance, reweight_normalize, softmax, FeatureVector, ProbVector};

/// One remembered sample: momentum-model feature plus its current class distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemorySlot {
    pub sample_id: u64,
    pub feature: FeatureVector,
    pub prob: ProbVector,
}

impl MemorySlot {
    /// Class used when compacting this slot into a centroid.
    pub fn category(&self) -> usize {
        self.prob.argmax()
    }
}

/// Which of the six memory flows are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub sm_to_st: bool,
    pub sm_to_lt: bool,
    pub st_to_lt: bool,
    pub sm_from_st: bool,
    pub sm_from_lt: bool,
    pub st_from_lt: bool,
}

impl FlowConfig {
    pub const ALL: FlowConfig = FlowConfig {
        sm_to_st: true,
        sm_to_lt: true,
        st_to_lt: true,
        sm_from_st: true,
        sm_from_lt: true,
        st_from_lt: true,
    };

    pub const NONE: FlowConfig = FlowConfig {
        sm_to_st: false,
        sm_to_lt: false,
        st_to_lt: false,
        sm_from_st: false,
        sm_from_lt: false,
        st_from_lt: false,
    };

    /// The seven ablation rows, from plain self-training to the full mechanism.
    pub const ABLATION_ROWS: [FlowConfig; 7] = [
        FlowConfig::NONE,
        FlowConfig { sm_to_st: true, sm_from_st: true, ..FlowConfig::NONE },
        FlowConfig { sm_to_lt: true, sm_from_lt: true, ..FlowConfig::NONE },
        FlowConfig {
            sm_to_st: true,
            sm_to_lt: true,
            sm_from_st: true,
            sm_from_lt: true,
            ..FlowConfig::NONE
        },
        FlowConfig { st_from_lt: false, ..FlowConfig::ALL },
        FlowConfig { st_to_lt: false, ..FlowConfig::ALL },
        FlowConfig::ALL,
    ];

    pub fn any_sensory_calibration(&self) -> bool {
        self.sm_from_st || self.sm_from_lt
    }

    fn named(&self) -> [(&'static str, bool); 6] {
        [
            ("SM->ST", self.sm_to_st),
            ("SM->LT", self.sm_to_lt),
            ("ST->LT", self.st_to_lt),
            ("SM<-ST", self.sm_from_st),
            ("SM<-LT", self.sm_from_lt),
            ("ST<-LT", self.st_from_lt),
        ]
    }
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig::ALL
    }
}

/// `SM->ST+SM<-ST` style label, or `none`.
impl fmt::Display for FlowConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let active: Vec<&str> = self.named().iter().filter(|(_, on)| *on).map(|(n, _)| *n).collect();
        if active.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&active.join("+"))
        }
    }
}

/// Buffer for the current batch; fully replaced on every step.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SensoryMemory {
    slots: Vec<MemorySlot>,
}

impl SensoryMemory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn slots(&self) -> &[MemorySlot] {
        &self.slots
    }

    /// Replaces the buffer with `batch` and hands back the previous contents.
    pub fn refresh(&mut self, batch: Vec<MemorySlot>) -> Result<Vec<MemorySlot>> {
        let first = batch
            .first()
            .ok_or_else(|| Error::invalid("sensory refresh with an empty batch"))?;
        let (dim, classes) = (first.feature.len(), first.prob.len());
        if batch.iter().any(|s| s.feature.len() != dim || s.prob.len() != classes) {
            return Err(Error::invalid("batch slots disagree on feature dimension or class count"));
        }
        Ok(std::mem::replace(&mut self.slots, batch))
    }

    /// The `n` highest-entropy slots, most uncertain first; ties go to the lower id.
    pub fn select_hard(&self, n: usize) -> Result<Vec<MemorySlot>> {
        if n == 0 || n > self.slots.len() {
            return Err(Error::invalid(format!(
                "cannot select {n} hard samples from {} slots",
                self.slots.len()
            )));
        }
        let mut ranked: Vec<(f64, &MemorySlot)> = self.slots.iter().map(|s| (entropy(&s.prob), s)).collect();
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.sample_id.cmp(&b.1.sample_id)));
        Ok(ranked.into_iter().take(n).map(|(_, s)| s.clone()).collect())
    }
}

/// Fixed-capacity FIFO queue of hard samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShortTermMemory {
    queue: VecDeque<MemorySlot>,
    capacity: usize,
    total_enqueued: u64,
    total_evicted: u64,
}

impl ShortTermMemory {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::invalid("short-term capacity must be positive"));
        }
        Ok(Self {
            queue: VecDeque::with_capacity(capacity),
            capacity,
            total_enqueued: 0,
            total_evicted: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    pub fn slots(&self) -> impl ExactSizeIterator<Item = &MemorySlot> {
        self.queue.iter()
    }

    pub fn total_enqueued(&self) -> u64 {
        self.total_enqueued
    }

    pub fn total_evicted(&self) -> u64 {
        self.total_evicted
    }

    /// Enqueues at the back and evicts from the front only as far as needed to
    /// stay within capacity. Evicted slots come back oldest first.
    pub fn update(&mut self, incoming: Vec<MemorySlot>) -> Result<Vec<MemorySlot>> {
        if incoming.len() > self.capacity {
            return Err(Error::invalid(format!(
                "{} incoming slots exceed queue capacity {}",
                incoming.len(),
                self.capacity
            )));
        }
        self.total_enqueued += incoming.len() as u64;
        self.queue.extend(incoming);
        let overflow = self.queue.len().saturating_sub(self.capacity);
        self.total_evicted += overflow as u64;
        Ok(self.queue.drain(..overflow).collect())
    }
}

/// Per-class feature means with contributor counts. `counts[c] == 0` marks an
/// absent class whose centroid is the zero vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Centroids {
    pub centroids: Vec<FeatureVector>,
    pub counts: Vec<usize>,
}

impl Centroids {
    pub fn absent(classes: usize, dim: usize) -> Self {
        Centroids {
            centroids: vec![vec![0.0; dim]; classes],
            counts: vec![0; classes],
        }
    }

    pub fn is_present(&self, class: usize) -> bool {
        self.counts[class] > 0
    }
}

/// Mean feature per class, where a slot's class is the argmax of its stored probability.
pub fn compute_centroids<'a, I>(slots: I, classes: usize) -> Result<Centroids>
where
    I: IntoIterator<Item = &'a MemorySlot>,
{
    let mut iter = slots.into_iter().peekable();
    let dim = iter
        .peek()
        .map(|s| s.feature.len())
        .ok_or_else(|| Error::invalid("cannot compute centroids of an empty slot set"))?;
    let mut out = Centroids::absent(classes, dim);
    for slot in iter {
        if slot.feature.len() != dim {
            return Err(Error::invalid("slots disagree on feature dimension"));
        }
        let c = argmax_label(slot.prob.as_slice())?;
        if c >= classes {
            return Err(Error::invalid(format!("slot category {c} out of range for {classes} classes")));
        }
        out.counts[c] += 1;
        for (acc, v) in out.centroids[c].iter_mut().zip(&slot.feature) {
            *acc += v;
        }
    }
    for (centroid, &n) in out.centroids.iter_mut().zip(&out.counts) {
        if n > 0 {
            centroid.iter_mut().for_each(|v| *v /= n as f64);
        }
    }
    Ok(out)
}

/// Per-class centroids accumulated with a momentum average.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongTermCentroids {
    centroids: Vec<FeatureVector>,
    initialized: Vec<bool>,
    /// Weight kept on the old centroid in each update.
    momentum: f64,
}

impl LongTermCentroids {
    pub fn new(classes: usize, dim: usize, momentum: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::invalid(format!("long-term momentum {momentum} outside [0, 1)")));
        }
        if classes == 0 || dim == 0 {
            return Err(Error::invalid("long-term memory needs at least one class and dimension"));
        }
        Ok(Self {
            centroids: vec![vec![0.0; dim]; classes],
            initialized: vec![false; classes],
            momentum,
        })
    }

    pub fn classes(&self) -> usize {
        self.centroids.len()
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn centroid(&self, class: usize) -> Option<&[f64]> {
        self.initialized[class].then(|| self.centroids[class].as_slice())
    }

    pub fn is_initialized(&self, class: usize) -> bool {
        self.initialized[class]
    }

    pub fn any_initialized(&self) -> bool {
        self.initialized.iter().any(|&b| b)
    }

    /// Folds evicted slots (as selected by `flows`) into the centroids.
    /// First contact with a class copies the batch centroid; afterwards
    /// `new = (1 - momentum) * batch + momentum * old`.
    pub fn consolidate(
        &mut self,
        evicted_sensory: &[MemorySlot],
        evicted_short: &[MemorySlot],
        flows: &FlowConfig,
    ) -> Result<()> {
        let sensory = evicted_sensory.iter().filter(|_| flows.sm_to_lt);
        let short = evicted_short.iter().filter(|_| flows.st_to_lt);
        let pooled: Vec<&MemorySlot> = sensory.chain(short).collect();
        if pooled.is_empty() {
            return Ok(());
        }
        let batch = compute_centroids(pooled, self.classes())?;
        for c in 0..self.classes() {
            if !batch.is_present(c) {
                continue;
            }
            let fresh = &batch.centroids[c];
            if fresh.len() != self.centroids[c].len() {
                return Err(Error::invalid("evicted features do not match long-term dimension"));
            }
            if self.initialized[c] {
                for (old, new) in self.centroids[c].iter_mut().zip(fresh) {
                    *old = (1.0 - self.momentum) * new + self.momentum * *old;
                }
            } else {
                self.centroids[c].clone_from(fresh);
                self.initialized[c] = true;
            }
        }
        Ok(())
    }

    /// Softmax over initialized classes of the negative L1 distance from
    /// `feature`; uninitialized classes get weight 0. `None` when no class is
    /// initialized yet.
    pub fn calibration_weights(&self, feature: &[f64]) -> Result<Option<Vec<f64>>> {
        let present: Vec<usize> = (0..self.classes()).filter(|&c| self.initialized[c]).collect();
        if present.is_empty() {
            return Ok(None);
        }
        let scores = present
            .iter()
            .map(|&c| l1_distance(feature, &self.centroids[c]).map(|d| -d))
            .collect::<Result<Vec<f64>>>()?;
        let sm = softmax(&scores)?;
        let mut w = vec![0.0; self.classes()];
        for (&c, p) in present.iter().zip(sm.as_slice()) {
            w[c] = *p;
        }
        Ok(Some(w))
    }
}

/// Counters for calibrations that had to be skipped or patched up.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CalibrationWarnings {
    /// Reweighting produced an all-zero product; the slot was reset to uniform.
    pub degenerate_reweights: u64,
    /// Short-term calibration requested before any long-term centroid existed.
    pub skipped_short_term: u64,
    /// Sensory slots left uncalibrated because no centroid was present.
    pub uncalibrated_sensory: u64,
}

/// Re-weights every queued probability by its long-term calibration weights.
pub fn calibrate_short_term(
    st: &mut ShortTermMemory,
    lt: &LongTermCentroids,
    warnings: &mut CalibrationWarnings,
) -> Result<()> {
    if !lt.any_initialized() {
        warnings.skipped_short_term += 1;
        return Ok(());
    }
    for slot in st.queue.iter_mut() {
        let w = lt
            .calibration_weights(&slot.feature)?
            .expect("at least one class is initialized");
        slot.prob = match reweight_normalize(&slot.prob, &w) {
            Ok(p) => p,
            Err(Error::DegenerateCalibration) => {
                warnings.degenerate_reweights += 1;
                ProbVector::uniform(slot.prob.len())
            }
            Err(e) => return Err(e),
        };
    }
    Ok(())
}

/// New class distribution for one sensory feature from the long-term and
/// short-term centroids. Each active and present source adds a negative L1
/// distance to a class score; the softmax runs over classes with at least one
/// term. `None` when no term applies.
pub fn sensory_calibration(
    feature: &[f64],
    lt: &LongTermCentroids,
    st_centroids: &Centroids,
    flows: &FlowConfig,
) -> Result<Option<ProbVector>> {
    let classes = lt.classes();
    let mut scores = vec![0.0; classes];
    let mut touched = vec![false; classes];
    for c in 0..classes {
        if flows.sm_from_lt {
            if let Some(centroid) = lt.centroid(c) {
                scores[c] -= l1_distance(feature, centroid)?;
                touched[c] = true;
            }
        }
        if flows.sm_from_st && st_centroids.is_present(c) {
            scores[c] -= l1_distance(feature, &st_centroids.centroids[c])?;
            touched[c] = true;
        }
    }
    let active: Vec<usize> = (0..classes).filter(|&c| touched[c]).collect();
    if active.is_empty() {
        return Ok(None);
    }
    let sm = softmax(&active.iter().map(|&c| scores[c]).collect::<Vec<_>>())?;
    let mut out = vec![0.0; classes];
    for (&c, p) in active.iter().zip(sm.as_slice()) {
        out[c] = *p;
    }
    ProbVector::new(out).map(Some)
}

/// Sensory probabilities after one step, plus which slots were actually
/// recalibrated (the rest keep the momentum model's prediction).
#[derive(Debug, Clone, PartialEq)]
pub struct CalibratedBatch {
    pub probs: Vec<ProbVector>,
    pub calibrated: Vec<bool>,
}

/// Rewrites sensory slot probabilities in place from the two centroid sets.
pub fn calibrate_sensory(
    sm: &mut SensoryMemory,
    lt: &LongTermCentroids,
    st_centroids: &Centroids,
    flows: &FlowConfig,
    warnings: &mut CalibrationWarnings,
) -> Result<CalibratedBatch> {
    let mut calibrated = vec![false; sm.slots.len()];
    if flows.any_sensory_calibration() {
        for (slot, done) in sm.slots.iter_mut().zip(calibrated.iter_mut()) {
            match sensory_calibration(&slot.feature, lt, st_centroids, flows)? {
                Some(p) => {
                    slot.prob = p;
                    *done = true;
                }
                None => warnings.uncalibrated_sensory += 1,
            }
        }
    }
    Ok(CalibratedBatch {
        probs: sm.slots.iter().map(|s| s.prob.clone()).collect(),
        calibrated,
    })
}

/// Sizes and coefficients of a memory store.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemoryConfig {
    pub classes: usize,
    pub dim: usize,
    /// Hard samples moved into the queue per step.
    pub top_n: usize,
    pub queue_capacity: usize,
    /// Weight on the old long-term centroid.
    pub gamma_prime: f64,
}

/// All three memories plus warning counters; serializes to a JSON checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiMemState {
    pub config: MemoryConfig,
    pub sensory: SensoryMemory,
    pub short_term: ShortTermMemory,
    pub long_term: LongTermCentroids,
    pub warnings: CalibrationWarnings,
}

impl BiMemState {
    pub fn new(config: MemoryConfig) -> Result<Self> {
        if config.top_n == 0 || config.top_n > config.queue_capacity {
            return Err(Error::invalid(format!(
                "top_n {} must be in 1..={}",
                config.top_n, config.queue_capacity
            )));
        }
        Ok(Self {
            config,
            sensory: SensoryMemory::new(),
            short_term: ShortTermMemory::new(config.queue_capacity)?,
            long_term: LongTermCentroids::new(config.classes, config.dim, config.gamma_prime)?,
            warnings: CalibrationWarnings::default(),
        })
    }

    /// Centroids of the queue under its current (calibrated) probabilities.
    pub fn short_term_centroids(&self) -> Result<Centroids> {
        if self.short_term.is_empty() {
            Ok(Centroids::absent(self.config.classes, self.config.dim))
        } else {
            compute_centroids(self.short_term.slots(), self.config.classes)
        }
    }

    /// One forward memorization pass followed by backward calibration.
    pub fn step(&mut self, batch: Vec<MemorySlot>, flows: &FlowConfig) -> Result<CalibratedBatch> {
        let MemoryConfig { classes, dim, .. } = self.config;
        if batch.iter().any(|s| s.feature.len() != dim || s.prob.len() != classes) {
            return Err(Error::invalid(format!(
                "batch slots must have {dim}-dimensional features and {classes} classes"
            )));
        }

        let evicted_sensory = self.sensory.refresh(batch)?;
        let evicted_short = if flows.sm_to_st {
            let n = self.config.top_n.min(self.sensory.slots.len());
            let hard = self.sensory.select_hard(n)?;
            self.short_term.update(hard)?
        } else {
            Vec::new()
        };
        self.long_term.consolidate(&evicted_sensory, &evicted_short, flows)?;

        if flows.st_from_lt {
            calibrate_short_term(&mut self.short_term, &self.long_term, &mut self.warnings)?;
        }
        let st_centroids = self.short_term_centroids()?;
        calibrate_sensory(&mut self.sensory, &self.long_term, &st_centroids, flows, &mut self.warnings)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
