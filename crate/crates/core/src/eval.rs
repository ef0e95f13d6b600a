//! Accuracy metrics, run traces and the summary report.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::blackbox::PredictionSet;
use crate::data::{fmt_sig9, split_by_initial_correctness, LabeledDataset};
use crate::error::{Error, Result};

pub const TRACE_HEADER: &str = "iter,acc_all,acc_init_correct,acc_init_incorrect,pl_acc_denoised,pl_acc_blackbox";
pub const SUMMARY_HEADER: &str = "method,seed,final_acc,peak_acc,drop_incorrect_subset";

/// Tolerance for the partition identity on freshly computed traces.
pub const PARTITION_TOL: f64 = 1e-9;
/// Looser tolerance for traces read back from 9-digit CSV text.
pub const PARTITION_TOL_CSV: f64 = 1e-6;

pub fn accuracy(predictions: &[usize], truth: &[usize]) -> Result<f64> {
    if predictions.len() != truth.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} labels",
            predictions.len(),
            truth.len()
        )));
    }
    if truth.is_empty() {
        return Err(Error::invalid("accuracy of an empty label set"));
    }
    let hits = predictions.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// Accuracy restricted to the sample indices in `members`; `None` for an empty subset.
pub fn subset_accuracy(predictions: &[usize], truth: &[usize], members: &[usize]) -> Option<f64> {
    if members.is_empty() {
        return None;
    }
    let hits = members.iter().filter(|&&i| predictions[i] == truth[i]).count();
    Some(hits as f64 / members.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TracePoint {
    pub iter: usize,
    pub acc_all: f64,
    pub acc_init_correct: Option<f64>,
    pub acc_init_incorrect: Option<f64>,
    pub pl_acc_denoised: Option<f64>,
    pub pl_acc_blackbox: f64,
}

impl TracePoint {
    pub fn column(&self, name: &str) -> Result<Option<f64>> {
        Ok(match name {
            "iter" => Some(self.iter as f64),
            "acc_all" => Some(self.acc_all),
            "acc_init_correct" => self.acc_init_correct,
            "acc_init_incorrect" => self.acc_init_incorrect,
            "pl_acc_denoised" => self.pl_acc_denoised,
            "pl_acc_blackbox" => Some(self.pl_acc_blackbox),
            other => return Err(Error::invalid(format!("unknown trace column {other:?}"))),
        })
    }
}

/// Evaluation points of one adaptation run, in increasing iteration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunTrace {
    pub points: Vec<TracePoint>,
}

impl RunTrace {
    pub fn push(&mut self, point: TracePoint) -> Result<()> {
        if let Some(last) = self.points.last() {
            if point.iter <= last.iter {
                return Err(Error::invalid("trace iterations must strictly increase"));
            }
        }
        self.points.push(point);
        Ok(())
    }

    pub fn last(&self) -> Option<&TracePoint> {
        self.points.last()
    }

    pub fn to_csv_string(&self) -> String {
        let opt = |v: Option<f64>| v.map(fmt_sig9).unwrap_or_default();
        let mut s = String::from(TRACE_HEADER);
        s.push('\n');
        for p in &self.points {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                p.iter,
                fmt_sig9(p.acc_all),
                opt(p.acc_init_correct),
                opt(p.acc_init_incorrect),
                opt(p.pl_acc_denoised),
                fmt_sig9(p.pl_acc_blackbox)
            ));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        out.write_all(self.to_csv_string().as_bytes())
            .and_then(|_| out.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h == TRACE_HEADER => {}
            _ => return Err(Error::data(path, Some(1), format!("header must be {TRACE_HEADER}"))),
        }
        let mut trace = RunTrace::default();
        for (i, line) in lines {
            let lineno = Some(i as u64 + 1);
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 6 {
                return Err(Error::data(path, lineno, format!("expected 6 columns, found {}", cols.len())));
            }
            let num = |s: &str| -> Result<f64> {
                s.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::data(path, lineno, format!("bad number {s:?}")))
            };
            let opt = |s: &str| -> Result<Option<f64>> {
                if s.is_empty() {
                    Ok(None)
                } else {
                    num(s).map(Some)
                }
            };
            let iter = cols[0]
                .parse::<usize>()
                .map_err(|_| Error::data(path, lineno, format!("bad iteration {:?}", cols[0])))?;
            trace
                .push(TracePoint {
                    iter,
                    acc_all: num(cols[1])?,
                    acc_init_correct: opt(cols[2])?,
                    acc_init_incorrect: opt(cols[3])?,
                    pl_acc_denoised: opt(cols[4])?,
                    pl_acc_blackbox: num(cols[5])?,
                })
                .map_err(|e| Error::data(path, lineno, e.to_string()))?;
        }
        Ok(trace)
    }
}

/// Largest value of `column` minus its final value. `None` when the column
/// has no values.
pub fn peak_final_drop(trace: &RunTrace, column: &str) -> Result<Option<f64>> {
    if trace.points.is_empty() {
        return Err(Error::invalid("empty trace"));
    }
    let values = trace
        .points
        .iter()
        .map(|p| p.column(column))
        .collect::<Result<Vec<Option<f64>>>>()?;
    let present: Vec<f64> = values.into_iter().flatten().collect();
    let Some(last) = present.last() else {
        return Ok(None);
    };
    let peak = present.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(Some(peak - last))
}

/// Checks `acc_all = (n_c * acc_correct + n_i * acc_incorrect) / (n_c + n_i)`
/// for known subset sizes.
pub fn check_partition_identity(trace: &RunTrace, n_correct: usize, n_incorrect: usize, tol: f64) -> Result<()> {
    let n = (n_correct + n_incorrect) as f64;
    for p in &trace.points {
        let weighted = n_correct as f64 * p.acc_init_correct.unwrap_or(0.0)
            + n_incorrect as f64 * p.acc_init_incorrect.unwrap_or(0.0);
        if (weighted / n - p.acc_all).abs() > tol {
            return Err(Error::NumericFailure(format!(
                "partition identity violated at iteration {}: {} vs {}",
                p.iter,
                weighted / n,
                p.acc_all
            )));
        }
    }
    Ok(())
}

/// Partition identity check when subset sizes are unknown: every point must
/// place `acc_all` between the two subset accuracies with one common mixing
/// weight across the whole trace.
pub fn check_partition_consistency(trace: &RunTrace, tol: f64) -> Result<()> {
    let mut weight: Option<(f64, usize)> = None;
    for p in &trace.points {
        let fail = |msg: String| Err(Error::NumericFailure(format!("iteration {}: {msg}", p.iter)));
        match (p.acc_init_correct, p.acc_init_incorrect) {
            (None, None) => return fail("both subset accuracies are absent".into()),
            (Some(a), None) | (None, Some(a)) => {
                if (a - p.acc_all).abs() > tol {
                    return fail(format!("acc_all {} differs from its only subset {a}", p.acc_all));
                }
            }
            (Some(a), Some(b)) => {
                let (lo, hi) = (a.min(b), a.max(b));
                if p.acc_all < lo - tol || p.acc_all > hi + tol {
                    return fail(format!("acc_all {} outside [{lo}, {hi}]", p.acc_all));
                }
                // acc_all = b + w (a - b); w is the share of the initially-correct subset.
                if (a - b).abs() > 1e-2 {
                    let w = (p.acc_all - b) / (a - b);
                    match weight {
                        None => weight = Some((w, p.iter)),
                        Some((w0, at)) if (w - w0).abs() > tol * 1e3 => {
                            return fail(format!("subset weight {w} disagrees with {w0} implied at iteration {at}"))
                        }
                        Some(_) => {}
                    }
                }
            }
        }
    }
    Ok(())
}

/// Ground truth and subset membership for the target set, kept apart from
/// anything the training loop can reach.
#[derive(Debug, Clone)]
pub struct Evaluator {
    truth: Vec<usize>,
    blackbox: Vec<usize>,
    correct_idx: Vec<usize>,
    incorrect_idx: Vec<usize>,
}

impl Evaluator {
    /// `preds` must be aligned with `target` row order.
    pub fn new(target: &LabeledDataset, preds: &PredictionSet) -> Result<Self> {
        if preds.len() != target.len() || preds.records().iter().zip(target.ids()).any(|(r, id)| r.id != *id) {
            return Err(Error::invalid("predictions are not aligned with the target rows"));
        }
        let (correct, _) = split_by_initial_correctness(target, preds)?;
        let correct: std::collections::HashSet<u64> = correct.into_iter().collect();
        let (correct_idx, incorrect_idx) = (0..target.len()).partition(|&i| correct.contains(&target.ids()[i]));
        Ok(Self {
            truth: target.labels().to_vec(),
            blackbox: preds.records().iter().map(|r| r.yhat).collect(),
            correct_idx,
            incorrect_idx,
        })
    }

    pub fn n_correct(&self) -> usize {
        self.correct_idx.len()
    }

    pub fn n_incorrect(&self) -> usize {
        self.incorrect_idx.len()
    }

    /// Builds a trace point from the student's predictions on every target
    /// sample and, optionally, the current training labels (`None` marks
    /// samples without a label).
    pub fn point(&self, iter: usize, predicted: &[usize], pseudo_labels: Option<&[Option<usize>]>) -> Result<TracePoint> {
        let pl_acc_denoised = pseudo_labels.and_then(|labels| {
            let (hits, total) = labels
                .iter()
                .zip(&self.truth)
                .filter_map(|(l, t)| l.map(|l| l == *t))
                .fold((0usize, 0usize), |(h, n), hit| (h + hit as usize, n + 1));
            (total > 0).then(|| hits as f64 / total as f64)
        });
        Ok(TracePoint {
            iter,
            acc_all: accuracy(predicted, &self.truth)?,
            acc_init_correct: subset_accuracy(predicted, &self.truth, &self.correct_idx),
            acc_init_incorrect: subset_accuracy(predicted, &self.truth, &self.incorrect_idx),
            pl_acc_denoised,
            pl_acc_blackbox: accuracy(&self.blackbox, &self.truth)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub method: String,
    pub seed: Option<u64>,
    pub final_acc: f64,
    pub peak_acc: f64,
    pub drop_incorrect_subset: Option<f64>,
}

impl SummaryRow {
    pub fn from_trace(method: impl Into<String>, seed: Option<u64>, trace: &RunTrace) -> Result<Self> {
        let last = trace.last().ok_or_else(|| Error::invalid("empty trace"))?;
        Ok(Self {
            method: method.into(),
            seed,
            final_acc: last.acc_all,
            peak_acc: trace.points.iter().map(|p| p.acc_all).fold(f64::NEG_INFINITY, f64::max),
            drop_incorrect_subset: peak_final_drop(trace, "acc_init_incorrect")?,
        })
    }

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.method,
            self.seed.map(|s| s.to_string()).unwrap_or_default(),
            fmt_sig9(self.final_acc),
            fmt_sig9(self.peak_acc),
            self.drop_incorrect_subset.map(fmt_sig9).unwrap_or_default()
        )
    }
}

/// Method and seed from a trace file stem such as `bimem_seed3` or `vanilla_st_s3`.
/// Without a recognizable seed suffix the whole stem is the method.
pub fn parse_trace_name(stem: &str) -> (String, Option<u64>) {
    if let Some((method, tail)) = stem.rsplit_once('_') {
        let digits = tail.strip_prefix("seed").or_else(|| tail.strip_prefix('s')).unwrap_or(tail);
        if let Ok(seed) = digits.parse() {
            if !method.is_empty() {
                return (method.to_string(), Some(seed));
            }
        }
    }
    (stem.to_string(), None)
}

pub fn write_summary(rows: &[SummaryRow], path: &Path) -> Result<()> {
    let mut text = String::from(SUMMARY_HEADER);
    text.push('\n');
    for r in rows {
        text.push_str(&r.csv_line());
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
