//! Source-model training and the prediction file that is the only thing the
//! adaptation stage receives from the source side.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{fmt_sig9, LabeledDataset};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::model::{ClassifierParams, Layout};
use crate::numerics::ProbVector;

/// Label smoothing used by [`ExportMode::HardOnly`].
pub const HARD_ONLY_SMOOTHING: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRecord {
    pub id: u64,
    pub yhat: usize,
    pub probs: ProbVector,
}

/// Black-box predictions for every target sample.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    records: Vec<PredictionRecord>,
    classes: usize,
}

impl PredictionSet {
    pub fn new(records: Vec<PredictionRecord>) -> Result<Self> {
        let classes = records.first().map_or(0, |r| r.probs.len());
        let mut seen = HashSet::with_capacity(records.len());
        for r in &records {
            if r.probs.len() != classes {
                return Err(Error::invalid("prediction records disagree on class count"));
            }
            if r.yhat != r.probs.argmax() {
                return Err(Error::invalid(format!("record {}: yhat {} is not the argmax", r.id, r.yhat)));
            }
            if !seen.insert(r.id) {
                return Err(Error::invalid(format!("duplicate prediction id {}", r.id)));
            }
        }
        Ok(Self { records, classes })
    }

    pub fn records(&self) -> &[PredictionRecord] {
        &self.records
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Header `id,yhat,p0,...,p{C-1}`; probabilities with 9 significant digits.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        let mut header = vec!["id".to_string(), "yhat".to_string()];
        header.extend((0..self.classes).map(|c| format!("p{c}")));
        writeln!(out, "{}", header.join(",")).map_err(io)?;
        for r in &self.records {
            let probs: Vec<String> = r.probs.as_slice().iter().map(|p| fmt_sig9(*p)).collect();
            writeln!(out, "{},{},{}", r.id, r.yhat, probs.join(",")).map_err(io)?;
        }
        out.flush().map_err(io)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .flexible(true)
            .from_path(path)
            .map_err(|e| Error::data(path, None, e.to_string()))?;
        let header = reader.headers().map_err(|e| Error::data(path, Some(1), e.to_string()))?.clone();
        let cols: Vec<&str> = header.iter().collect();
        let classes = cols.len().saturating_sub(2);
        let valid = classes >= 1
            && cols[0] == "id"
            && cols[1] == "yhat"
            && (0..classes).all(|c| cols[c + 2] == format!("p{c}"));
        if !valid {
            return Err(Error::data(path, Some(1), "header must be id,yhat,p0,...,p{C-1}"));
        }
        let mut records = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|e| Error::data(path, None, e.to_string()))?;
            let line = record.position().map(|p| p.line());
            if record.len() != classes + 2 {
                return Err(Error::data(path, line, format!("expected {} columns, found {}", classes + 2, record.len())));
            }
            let id: u64 = record[0].trim().parse().map_err(|_| Error::data(path, line, "bad id"))?;
            let yhat: usize = record[1].trim().parse().map_err(|_| Error::data(path, line, "bad yhat"))?;
            let probs = (2..classes + 2)
                .map(|i| record[i].trim().parse::<f64>().map_err(|_| Error::data(path, line, "bad probability")))
                .collect::<Result<Vec<f64>>>()?;
            let probs = ProbVector::new(probs).map_err(|e| Error::data(path, line, e.to_string()))?;
            records.push(PredictionRecord { id, yhat, probs });
        }
        if records.is_empty() {
            return Ok(Self { records, classes });
        }
        PredictionSet::new(records).map_err(|e| Error::data(path, None, e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExportMode {
    /// Full probability vectors.
    Soft,
    /// Smoothed one-hot vectors of the predicted label only.
    HardOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SourceTraining {
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

/// Minibatch SGD on the supervised cross-entropy of the labeled source set.
pub fn train_source(source: &LabeledDataset, cfg: &SourceTraining) -> Result<ClassifierParams> {
    if source.is_empty() {
        return Err(Error::invalid("source dataset is empty"));
    }
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::invalid("source training needs batch_size > 0 and lr > 0"));
    }
    let layout = Layout::new(source.dim(), cfg.hidden, source.classes())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(3);
    let mut params = ClassifierParams::init(layout, &mut rng);
    let mut order: Vec<usize> = (0..source.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let xs: Vec<&[f64]> = chunk.iter().map(|&i| source.features()[i].as_slice()).collect();
            let ys: Vec<usize> = chunk.iter().map(|&i| source.labels()[i]).collect();
            params.sgd_step(&xs, &ys, cfg.lr)?;
        }
    }
    Ok(params)
}

/// Runs the source model over the target features. Ground-truth labels are
/// never read. Probabilities are rounded to the printed precision so that the
/// in-memory set equals what a round trip through the CSV yields.
pub fn export_predictions(
    model: &ClassifierParams,
    target: &LabeledDataset,
    mode: ExportMode,
    exec: Execution,
) -> Result<PredictionSet> {
    if model.layout().input != target.dim() {
        return Err(Error::invalid(format!(
            "model expects {} inputs, target has dimension {}",
            model.layout().input,
            target.dim()
        )));
    }
    let classes = model.layout().classes;
    let rows: Vec<(u64, &Vec<f64>)> = target.ids().iter().copied().zip(target.features()).collect();
    let records = exec.try_map(&rows, |(id, x)| {
        let (_, p) = model.forward(x)?;
        let probs = match mode {
            ExportMode::Soft => {
                let rounded = p.as_slice().iter().map(|v| fmt_sig9(*v).parse().expect("formatted float parses")).collect();
                ProbVector::new(rounded)?
            }
            ExportMode::HardOnly => ProbVector::smoothed_one_hot(classes, p.argmax(), HARD_ONLY_SMOOTHING)?,
        };
        Ok::<_, Error>(PredictionRecord {
            id: *id,
            yhat: probs.argmax(),
            probs,
        })
    })?;
    PredictionSet::new(records)
}
