//! Synthetic domain-shift datasets and their CSV files.

use std::collections::{HashMap, HashSet};
use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::blackbox::PredictionSet;
use crate::error::{Error, Result};
use crate::numerics::FeatureVector;

/// Formats a value with 9 significant digits, using the shortest text that
/// parses back to the rounded value.
pub fn fmt_sig9(v: f64) -> String {
    let rounded: f64 = format!("{v:.8e}").parse().expect("formatted float parses");
    format!("{rounded}")
}

/// Labeled samples; target labels exist for evaluation only.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    ids: Vec<u64>,
    features: Vec<FeatureVector>,
    labels: Vec<usize>,
    classes: usize,
    dim: usize,
}

/// Target samples with the ground truth removed. This is all the training
/// path of an adaptation run ever sees of the target domain.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledSet {
    pub ids: Vec<u64>,
    pub features: Vec<FeatureVector>,
}

impl LabeledDataset {
    pub fn new(
        ids: Vec<u64>,
        features: Vec<FeatureVector>,
        labels: Vec<usize>,
        classes: usize,
        dim: usize,
    ) -> Result<Self> {
        if ids.len() != features.len() || ids.len() != labels.len() {
            return Err(Error::invalid("ids, features and labels differ in length"));
        }
        if dim == 0 {
            return Err(Error::invalid("feature dimension must be positive"));
        }
        if let Some(f) = features.iter().find(|f| f.len() != dim) {
            return Err(Error::invalid(format!("feature of dimension {} in a {dim}-dimensional dataset", f.len())));
        }
        if features.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite feature value"));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::invalid(format!("label {l} out of range for {classes} classes")));
        }
        let mut seen = HashSet::with_capacity(ids.len());
        if let Some(dup) = ids.iter().find(|id| !seen.insert(**id)) {
            return Err(Error::invalid(format!("duplicate id {dup}")));
        }
        Ok(Self { ids, features, labels, classes, dim })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn features(&self) -> &[FeatureVector] {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn without_labels(&self) -> UnlabeledSet {
        UnlabeledSet {
            ids: self.ids.clone(),
            features: self.features.clone(),
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        let mut header = vec!["id".to_string()];
        header.extend((0..self.dim).map(|d| format!("f{d}")));
        header.push("label".into());
        writeln!(out, "{}", header.join(",")).map_err(io)?;
        for ((id, f), l) in self.ids.iter().zip(&self.features).zip(&self.labels) {
            let cols: Vec<String> = f.iter().map(|v| fmt_sig9(*v)).collect();
            writeln!(out, "{id},{},{l}", cols.join(",")).map_err(io)?;
        }
        out.flush().map_err(io)
    }

    /// Reads a dataset CSV. With `classes = None` the class count is inferred as
    /// one more than the largest label.
    pub fn read_csv(path: &Path, classes: Option<usize>) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .flexible(true)
            .from_path(path)
            .map_err(|e| csv_error(path, e))?;
        let header = reader.headers().map_err(|e| csv_error(path, e))?.clone();
        let cols: Vec<&str> = header.iter().collect();
        let dim = cols.len().saturating_sub(2);
        let valid_header = cols.len() >= 3
            && cols[0] == "id"
            && cols[cols.len() - 1] == "label"
            && (0..dim).all(|d| cols[d + 1] == format!("f{d}"));
        if !valid_header {
            return Err(Error::data(path, Some(1), "header must be id,f0,...,f{D-1},label"));
        }

        let (mut ids, mut features, mut labels) = (Vec::new(), Vec::new(), Vec::new());
        let mut seen = HashSet::new();
        for record in reader.records() {
            let record = record.map_err(|e| csv_error(path, e))?;
            let line = record.position().map(|p| p.line());
            if record.len() != dim + 2 {
                return Err(Error::data(path, line, format!("expected {} columns, found {}", dim + 2, record.len())));
            }
            let id: u64 = record[0]
                .trim()
                .parse()
                .map_err(|_| Error::data(path, line, format!("bad id {:?}", &record[0])))?;
            if !seen.insert(id) {
                return Err(Error::data(path, line, format!("duplicate id {id}")));
            }
            let f = (1..=dim)
                .map(|i| {
                    record[i]
                        .trim()
                        .parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| Error::data(path, line, format!("bad feature value {:?}", &record[i])))
                })
                .collect::<Result<Vec<f64>>>()?;
            let label: usize = record[dim + 1]
                .trim()
                .parse()
                .map_err(|_| Error::data(path, line, format!("bad label {:?}", &record[dim + 1])))?;
            if let Some(c) = classes {
                if label >= c {
                    return Err(Error::data(path, line, format!("label {label} out of range for {c} classes")));
                }
            }
            ids.push(id);
            features.push(f);
            labels.push(label);
        }
        let classes = classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
        LabeledDataset::new(ids, features, labels, classes, dim).map_err(|e| Error::data(path, None, e.to_string()))
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::data(path, line, format!("{other:?}")),
    }
}

/// Parameters of the shifted Gaussian-mixture benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub classes: usize,
    pub dim: usize,
    pub n_per_class: usize,
    /// Distance between neighbouring class means.
    pub class_separation: f64,
    /// Translation applied to every target class mean.
    pub target_shift: FeatureVector,
    /// Rotation of the target means in the plane of the first two coordinates.
    pub target_rotation_deg: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl GenConfig {
    fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.dim < 2 || self.n_per_class < 1 {
            return Err(Error::invalid("need classes >= 2, dim >= 2, n_per_class >= 1"));
        }
        if self.target_shift.len() != self.dim {
            return Err(Error::invalid(format!(
                "target_shift has {} entries, expected {}",
                self.target_shift.len(),
                self.dim
            )));
        }
        let finite = [self.class_separation, self.target_rotation_deg, self.noise_sigma]
            .iter()
            .chain(&self.target_shift)
            .all(|v| v.is_finite());
        if !finite || self.class_separation <= 0.0 || self.noise_sigma < 0.0 {
            return Err(Error::invalid("separation must be positive, sigma nonnegative, all values finite"));
        }
        Ok(())
    }

    /// Source class means: evenly spaced on a circle in the first two
    /// coordinates, neighbours `class_separation` apart.
    pub fn source_means(&self) -> Vec<FeatureVector> {
        let c = self.classes as f64;
        let radius = self.class_separation / (2.0 * (PI / c).sin());
        (0..self.classes)
            .map(|k| {
                let angle = 2.0 * PI * k as f64 / c;
                let mut m = vec![0.0; self.dim];
                m[0] = radius * angle.cos();
                m[1] = radius * angle.sin();
                m
            })
            .collect()
    }

    /// Target class means: source means rotated, then translated.
    pub fn target_means(&self) -> Vec<FeatureVector> {
        let (s, c) = self.target_rotation_deg.to_radians().sin_cos();
        self.source_means()
            .into_iter()
            .map(|m| {
                let mut t = m.clone();
                t[0] = c * m[0] - s * m[1];
                t[1] = s * m[0] + c * m[1];
                t.iter_mut().zip(&self.target_shift).for_each(|(v, d)| *v += d);
                t
            })
            .collect()
    }
}

fn sample_mixture(means: &[FeatureVector], cfg: &GenConfig, rng: &mut ChaCha8Rng) -> Result<LabeledDataset> {
    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::invalid(e.to_string()))?;
    let mut rows: Vec<(FeatureVector, usize)> = Vec::with_capacity(cfg.classes * cfg.n_per_class);
    for (label, mean) in means.iter().enumerate() {
        for _ in 0..cfg.n_per_class {
            rows.push((mean.iter().map(|m| m + noise.sample(rng)).collect(), label));
        }
    }
    rows.shuffle(rng);
    let ids = (0..rows.len() as u64).collect();
    let (features, labels) = rows.into_iter().unzip();
    LabeledDataset::new(ids, features, labels, cfg.classes, cfg.dim)
}

/// Draws a labeled source set and a shifted target set with the same class structure.
pub fn gen_shifted_gaussians(cfg: &GenConfig) -> Result<(LabeledDataset, LabeledDataset)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let source = sample_mixture(&cfg.source_means(), cfg, &mut rng)?;
    rng.set_stream(2);
    let target = sample_mixture(&cfg.target_means(), cfg, &mut rng)?;
    Ok((source, target))
}

/// Splits target ids by whether the black-box label matches the ground truth.
pub fn split_by_initial_correctness(target: &LabeledDataset, preds: &PredictionSet) -> Result<(Vec<u64>, Vec<u64>)> {
    let by_id: HashMap<u64, usize> = preds.records().iter().map(|r| (r.id, r.yhat)).collect();
    let mut correct = Vec::new();
    let mut incorrect = Vec::new();
    for (&id, &label) in target.ids().iter().zip(target.labels()) {
        let yhat = by_id
            .get(&id)
            .ok_or_else(|| Error::data("predictions", None, format!("no prediction for target id {id}")))?;
        if *yhat == label {
            correct.push(id);
        } else {
            incorrect.push(id);
        }
    }
    Ok((correct, incorrect))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blackbox::PredictionRecord;
    use crate::numerics::ProbVector;
    use proptest::prelude::*;

    fn cfg(shift: f64, rot: f64) -> GenConfig {
        GenConfig {
            classes: 3,
            dim: 4,
            n_per_class: 100,
            class_separation: 4.0,
            target_shift: vec![shift, 0.0, 0.0, 0.0],
            target_rotation_deg: rot,
            noise_sigma: 1.0,
            seed: 9,
        }
    }

    #[test]
    fn classes_are_balanced() {
        let (s, t) = gen_shifted_gaussians(&cfg(1.0, 20.0)).unwrap();
        assert_eq!(s.len(), 300);
        assert_eq!(t.len(), 300);
        assert_eq!(s.class_counts(), vec![100; 3]);
        assert_eq!(t.class_counts(), vec![100; 3]);
    }

    #[test]
    fn null_shift_gives_identical_distributions() {
        let c = cfg(0.0, 0.0);
        assert_eq!(c.source_means(), c.target_means());
        let (s, t) = gen_shifted_gaussians(&c).unwrap();
        assert_ne!(s.features(), t.features());
        for k in 0..3 {
            let mean = |d: &LabeledDataset| {
                let rows: Vec<&FeatureVector> = d.features().iter().zip(d.labels()).filter(|(_, &l)| l == k).map(|(f, _)| f).collect();
                rows.iter().map(|f| f[0]).sum::<f64>() / rows.len() as f64
            };
            assert!((mean(&s) - mean(&t)).abs() < 0.4);
        }
    }

    #[test]
    fn neighbouring_means_are_separated() {
        let c = GenConfig { classes: 5, dim: 2, target_shift: vec![0.0, 0.0], ..cfg(0.0, 0.0) };
        let m = c.source_means();
        let d: f64 = m[0].iter().zip(&m[1]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!((d - 4.0).abs() < 1e-12);
    }

    #[test]
    fn rotation_and_shift_move_means() {
        let c = GenConfig { target_shift: vec![1.0, 2.0, 0.0, 0.0], ..cfg(0.0, 90.0) };
        let src = c.source_means();
        let tgt = c.target_means();
        assert!((tgt[0][0] - (-src[0][1] + 1.0)).abs() < 1e-12);
        assert!((tgt[0][1] - (src[0][0] + 2.0)).abs() < 1e-12);
    }

    #[test]
    fn generation_is_seeded() {
        let a = gen_shifted_gaussians(&cfg(1.0, 10.0)).unwrap();
        assert_eq!(a, gen_shifted_gaussians(&cfg(1.0, 10.0)).unwrap());
        let b = gen_shifted_gaussians(&GenConfig { seed: 10, ..cfg(1.0, 10.0) }).unwrap();
        assert_ne!(a.0, b.0);
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(gen_shifted_gaussians(&GenConfig { classes: 1, ..cfg(0.0, 0.0) }).is_err());
        assert!(gen_shifted_gaussians(&GenConfig { n_per_class: 0, ..cfg(0.0, 0.0) }).is_err());
        assert!(gen_shifted_gaussians(&GenConfig { target_shift: vec![0.0], ..cfg(0.0, 0.0) }).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let (s, _) = gen_shifted_gaussians(&cfg(1.0, 10.0)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        s.write_csv(&path).unwrap();
        let back = LabeledDataset::read_csv(&path, Some(3)).unwrap();
        assert_eq!(back.ids(), s.ids());
        assert_eq!(back.labels(), s.labels());
        for (a, b) in back.features().iter().flatten().zip(s.features().iter().flatten()) {
            assert_eq!(*a, fmt_sig9(*b).parse::<f64>().unwrap());
        }
        // Writing what was read reproduces the file byte for byte.
        let again = dir.path().join("again.csv");
        back.write_csv(&again).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
    }

    #[test]
    fn csv_errors_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "id,f0,f1,label\n0,1.0,2.0,0\n1,1.0,1\n").unwrap();
        let err = LabeledDataset::read_csv(&path, Some(2)).unwrap_err();
        assert!(matches!(err, Error::Data { line: Some(3), .. }), "{err}");
        assert!(err.to_string().contains("line 3"));

        std::fs::write(&path, "id,f0,f1,label\n0,1.0,2.0,0\n0,1.0,2.0,1\n").unwrap();
        assert!(matches!(LabeledDataset::read_csv(&path, Some(2)), Err(Error::Data { line: Some(3), .. })));

        std::fs::write(&path, "id,f0,f1,label\n0,1.0,2.0,5\n").unwrap();
        assert!(matches!(LabeledDataset::read_csv(&path, Some(2)), Err(Error::Data { line: Some(2), .. })));

        std::fs::write(&path, "id,x,label\n").unwrap();
        assert!(matches!(LabeledDataset::read_csv(&path, None), Err(Error::Data { line: Some(1), .. })));
    }

    #[test]
    fn header_only_file_is_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.csv");
        std::fs::write(&path, "id,f0,f1,f2,label\n").unwrap();
        let d = LabeledDataset::read_csv(&path, Some(4)).unwrap();
        assert!(d.is_empty());
        assert_eq!(d.dim(), 3);
    }

    #[test]
    fn sig9_formatting() {
        assert_eq!(fmt_sig9(0.7310585786300049), "0.731058579");
        assert_eq!(fmt_sig9(1.0), "1");
        assert_eq!(fmt_sig9(-1234.56789012), "-1234.56789");
        assert_eq!(fmt_sig9(1.5e-20), "0.000000000000000000015");
    }

    fn preds_from(yhat: &[usize], classes: usize) -> PredictionSet {
        let records = yhat
            .iter()
            .enumerate()
            .map(|(i, &y)| PredictionRecord {
                id: i as u64,
                yhat: y,
                probs: ProbVector::smoothed_one_hot(classes, y, 0.0).unwrap(),
            })
            .collect();
        PredictionSet::new(records).unwrap()
    }

    #[test]
    fn split_examples() {
        let labels: Vec<usize> = (0..50).map(|i| i % 5).collect();
        let t = LabeledDataset::new((0..50).collect(), vec![vec![0.0, 0.0]; 50], labels.clone(), 5, 2).unwrap();
        let (c, i) = split_by_initial_correctness(&t, &preds_from(&labels, 5)).unwrap();
        assert_eq!((c.len(), i.len()), (50, 0));
        let (c, i) = split_by_initial_correctness(&t, &preds_from(&[0; 50], 5)).unwrap();
        assert_eq!((c.len(), i.len()), (10, 40));
        assert!(split_by_initial_correctness(&t, &preds_from(&[0; 10], 5)).is_err());
    }

    proptest! {
        #[test]
        fn split_is_a_partition(truth in prop::collection::vec(0usize..4, 1..60), seed in prop::collection::vec(0usize..4, 60)) {
            let n = truth.len();
            let t = LabeledDataset::new((0..n as u64).collect(), vec![vec![0.0, 0.0]; n], truth, 4, 2).unwrap();
            let (c, i) = split_by_initial_correctness(&t, &preds_from(&seed[..n], 4)).unwrap();
            let mut all: Vec<u64> = c.iter().chain(&i).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n as u64).collect::<Vec<_>>());
            prop_assert!(c.iter().all(|x| !i.contains(x)));
        }
    }
}
