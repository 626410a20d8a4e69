//! Confusion-matrix metrics and cross-validation aggregation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::slide::write_atomic;
use crate::error::{Error, Result};

/// `matrix[label * classes + pred]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub classes: usize,
    pub matrix: Vec<u64>,
}

impl ConfusionCounts {
    pub fn new(classes: usize) -> Self {
        ConfusionCounts {
            classes,
            matrix: vec![0; classes * classes],
        }
    }

    pub fn get(&self, label: usize, pred: usize) -> u64 {
        self.matrix[label * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.matrix.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|k| self.get(k, k)).sum()
    }

    pub fn tp(&self, k: usize) -> u64 {
        self.get(k, k)
    }

    pub fn fp(&self, k: usize) -> u64 {
        (0..self.classes).filter(|&l| l != k).map(|l| self.get(l, k)).sum()
    }

    pub fn fn_(&self, k: usize) -> u64 {
        (0..self.classes).filter(|&p| p != k).map(|p| self.get(k, p)).sum()
    }

    /// Pixels labelled `k`.
    pub fn support(&self, k: usize) -> u64 {
        (0..self.classes).map(|p| self.get(k, p)).sum()
    }

    pub fn merge(&mut self, other: &ConfusionCounts) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::Precondition(format!(
                "cannot merge {}-class and {}-class counts",
                self.classes, other.classes
            )));
        }
        for (a, b) in self.matrix.iter_mut().zip(&other.matrix) {
            *a += b;
        }
        Ok(())
    }
}

pub fn confusion_counts(pred: &[u32], label: &[u32], classes: usize, ignore_index: Option<u32>) -> Result<ConfusionCounts> {
    if pred.len() != label.len() {
        return Err(Error::Precondition(format!(
            "prediction has {} pixels, label has {}",
            pred.len(),
            label.len()
        )));
    }
    let mut c = ConfusionCounts::new(classes);
    for (&p, &l) in pred.iter().zip(label) {
        if Some(l) == ignore_index {
            continue;
        }
        if p as usize >= classes || l as usize >= classes {
            return Err(Error::Argument(format!("class index {} outside 0..{classes}", p.max(l))));
        }
        c.matrix[l as usize * classes + p as usize] += 1;
    }
    Ok(c)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct F1Scores {
    pub per_class: Vec<f64>,
    /// Class occurs in the labels or the predictions.
    pub present: Vec<bool>,
    /// Unweighted mean over present classes.
    pub macro_mean: f64,
    /// F1 of the pooled TP/FP/FN tallies.
    pub micro: f64,
}

fn f1(tp: u64, fp: u64, fn_: u64) -> f64 {
    let denom = tp as f64 + 0.5 * (fp + fn_) as f64;
    if denom == 0.0 {
        0.0
    } else {
        tp as f64 / denom
    }
}

pub fn f1_score(c: &ConfusionCounts) -> F1Scores {
    let k = c.classes;
    let per_class: Vec<f64> = (0..k).map(|i| f1(c.tp(i), c.fp(i), c.fn_(i))).collect();
    let present: Vec<bool> = (0..k).map(|i| c.tp(i) + c.fp(i) + c.fn_(i) > 0).collect();
    for i in (0..k).filter(|&i| !present[i]) {
        log::debug!("class {i} absent from labels and predictions; F1 0/0 set to 0 and left out of the mean");
    }
    let used: Vec<f64> = per_class.iter().zip(&present).filter(|p| *p.1).map(|p| *p.0).collect();
    let macro_mean = if used.is_empty() {
        log::warn!("no class present; mean F1 0/0 set to 0");
        0.0
    } else {
        used.iter().sum::<f64>() / used.len() as f64
    };
    let (tp, fp, fn_) = (0..k).fold((0, 0, 0), |a, i| (a.0 + c.tp(i), a.1 + c.fp(i), a.2 + c.fn_(i)));
    F1Scores {
        per_class,
        present,
        macro_mean,
        micro: f1(tp, fp, fn_),
    }
}

pub fn pixel_accuracy(c: &ConfusionCounts) -> Result<f64> {
    match c.total() {
        0 => Err(Error::UndefinedMetric("pixel accuracy over zero evaluated pixels".into())),
        n => Ok(c.trace() as f64 / n as f64),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub fold: Option<usize>,
    pub per_class_f1: Vec<f64>,
    pub mean_f1: f64,
    pub micro_f1: f64,
    pub accuracy: f64,
    /// Labelled pixels per class.
    pub support: Vec<u64>,
    pub pixels: u64,
}

impl Metrics {
    pub fn from_counts(c: &ConfusionCounts, fold: Option<usize>) -> Result<Self> {
        let f = f1_score(c);
        Ok(Metrics {
            fold,
            accuracy: pixel_accuracy(c)?,
            per_class_f1: f.per_class,
            mean_f1: f.macro_mean,
            micro_f1: f.micro,
            support: (0..c.classes).map(|k| c.support(k)).collect(),
            pixels: c.total(),
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StdKind {
    Population,
    #[default]
    Sample,
}

/// Mean and standard deviation; a single value has std 0 under either kind.
pub fn mean_std(values: &[f64], kind: StdKind) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::Precondition("aggregation needs at least one value".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    let std = match (kind, values.len()) {
        (_, 1) => 0.0,
        (StdKind::Population, _) => (ss / n).sqrt(),
        (StdKind::Sample, _) => (ss / (n - 1.0)).sqrt(),
    };
    Ok((mean, std))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Averaging {
    #[default]
    Macro,
    Micro,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvSummary {
    pub mean_f1: f64,
    pub std_f1: f64,
    pub mean_acc: f64,
    pub std_acc: f64,
    pub macro_or_micro: Averaging,
    pub folds: usize,
}

pub fn aggregate_cv(runs: &[Metrics], averaging: Averaging, kind: StdKind) -> Result<CvSummary> {
    let f1s: Vec<f64> = runs
        .iter()
        .map(|m| match averaging {
            Averaging::Macro => m.mean_f1,
            Averaging::Micro => m.micro_f1,
        })
        .collect();
    let acc: Vec<f64> = runs.iter().map(|m| m.accuracy).collect();
    let (mean_f1, std_f1) = mean_std(&f1s, kind)?;
    let (mean_acc, std_acc) = mean_std(&acc, kind)?;
    Ok(CvSummary {
        mean_f1,
        std_f1,
        mean_acc,
        std_acc,
        macro_or_micro: averaging,
        folds: runs.len(),
    })
}

/// `report.csv` (one row per fold and class, plus `mean` rows) and one
/// summary JSON per averaging mode.
pub fn write_report(dir: &Path, runs: &[Metrics], kind: StdKind) -> Result<Vec<CvSummary>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["fold", "class", "f1", "accuracy", "support"])?;
    for (i, m) in runs.iter().enumerate() {
        let fold = m.fold.unwrap_or(i).to_string();
        for (k, f) in m.per_class_f1.iter().enumerate() {
            w.write_record([fold.clone(), k.to_string(), f.to_string(), m.accuracy.to_string(), m.support[k].to_string()])?;
        }
        w.write_record([fold, "mean".into(), m.mean_f1.to_string(), m.accuracy.to_string(), m.pixels.to_string()])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Validation(e.to_string()))?;
    write_atomic(&dir.join("report.csv"), &bytes)?;
    let summaries = vec![
        aggregate_cv(runs, Averaging::Macro, kind)?,
        aggregate_cv(runs, Averaging::Micro, kind)?,
    ];
    write_atomic(&dir.join("summary.json"), &serde_json::to_vec_pretty(&summaries[0])?)?;
    write_atomic(&dir.join("summary_micro.json"), &serde_json::to_vec_pretty(&summaries[1])?)?;
    Ok(summaries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn formula_arithmetic() {
        // label 0 predicted 0 twice, 1 predicted 0 once, 0 predicted 1 once
        let c = confusion_counts(&[0, 0, 0, 1], &[0, 0, 1, 0], 2, None).unwrap();
        assert_eq!((c.tp(0), c.fp(0), c.fn_(0)), (2, 1, 1));
        assert_abs_diff_eq!(f1_score(&c).per_class[0], 2.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn identical_maps() {
        let m = [0, 1, 2, 2, 1];
        let c = confusion_counts(&m, &m, 3, None).unwrap();
        assert_eq!(c.trace(), c.total());
        let f = f1_score(&c);
        assert_eq!(f.per_class, vec![1.0; 3]);
        assert_eq!(pixel_accuracy(&c).unwrap(), 1.0);
    }

    #[test]
    fn binary_accuracy_half() {
        let c = confusion_counts(&[1, 0, 1, 0], &[1, 0, 0, 1], 2, None).unwrap();
        assert_eq!(pixel_accuracy(&c).unwrap(), 0.5);
    }

    #[test]
    fn ignored_pixels() {
        let c = confusion_counts(&[0, 1], &[9, 9], 2, Some(9)).unwrap();
        assert_eq!(c.total(), 0);
        assert!(matches!(pixel_accuracy(&c), Err(Error::UndefinedMetric(_))));
        assert_eq!(f1_score(&c).macro_mean, 0.0);
        assert!(confusion_counts(&[0], &[0, 1], 2, None).is_err());
        assert!(matches!(confusion_counts(&[0], &[5], 2, None), Err(Error::Argument(_))));
    }

    #[test]
    fn absent_class_left_out_of_mean() {
        let c = confusion_counts(&[0, 1, 1], &[0, 1, 0], 3, None).unwrap();
        let f = f1_score(&c);
        assert_eq!(f.present, vec![true, true, false]);
        assert_abs_diff_eq!(f.macro_mean, (f.per_class[0] + f.per_class[1]) / 2.0, epsilon = 1e-15);
    }

    #[test]
    fn cv_aggregation() {
        let (m, s) = mean_std(&[0.8, 0.8, 0.8], StdKind::Sample).unwrap();
        assert_abs_diff_eq!(m, 0.8, epsilon = 1e-12);
        assert_abs_diff_eq!(s, 0.0, epsilon = 1e-12);
        assert_eq!(mean_std(&[0.5], StdKind::Population).unwrap(), (0.5, 0.0));
        let (m, s) = mean_std(&[0.7, 0.9], StdKind::Sample).unwrap();
        assert_abs_diff_eq!(m, 0.8, epsilon = 1e-12);
        assert_abs_diff_eq!(s, (0.02f64).sqrt(), epsilon = 1e-12);
        assert!(mean_std(&[], StdKind::Sample).is_err());
    }

    #[test]
    fn report_files() {
        let dir = tempfile::tempdir().unwrap();
        let c = confusion_counts(&[0, 1, 1, 0], &[0, 1, 0, 0], 2, None).unwrap();
        let m = Metrics::from_counts(&c, Some(0)).unwrap();
        let s = write_report(dir.path(), &[m.clone(), Metrics { fold: Some(1), ..m }], StdKind::Sample).unwrap();
        assert_eq!(s[0].std_f1, 0.0);
        let csv = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
        assert!(csv.starts_with("fold,class,f1,accuracy,support\n"));
        assert_eq!(csv.lines().count(), 7);
        let json: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("summary.json")).unwrap()).unwrap();
        assert_eq!(json["macro_or_micro"], "macro");
    }
}
