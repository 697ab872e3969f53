//! Confusion matrices and Matthews correlation coefficients.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// `counts[true][predicted]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn zeros(num_classes: usize) -> Self {
        Self { counts: vec![vec![0; num_classes]; num_classes] }
    }

    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let c = counts.len();
        if counts.iter().any(|r| r.len() != c) {
            return Err(Error::shape("confusion matrix must be square"));
        }
        Ok(Self { counts })
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth][pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn add(&mut self, truth: usize, pred: usize) -> Result<()> {
        let c = self.num_classes();
        if truth >= c || pred >= c {
            return Err(Error::invalid(format!("class index ({truth}, {pred}) out of range for {c} classes")));
        }
        self.counts[truth][pred] += 1;
        Ok(())
    }

    /// Element-wise sum.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes() != self.num_classes() {
            return Err(Error::shape("cannot merge confusion matrices of different sizes"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        Ok(())
    }

    /// Class `k` against the rest as `[[TN, FP], [FN, TP]]`.
    pub fn binarize(&self, k: usize) -> ConfusionMatrix {
        let s = self.total();
        let tp = self.counts[k][k];
        let fn_ = self.counts[k].iter().sum::<u64>() - tp;
        let fp = self.counts.iter().map(|r| r[k]).sum::<u64>() - tp;
        ConfusionMatrix { counts: vec![vec![s - tp - fn_ - fp, fp], vec![fn_, tp]] }
    }
}

pub fn confusion(preds: &[usize], labels: &[usize], num_classes: usize) -> Result<ConfusionMatrix> {
    if preds.len() != labels.len() {
        return Err(Error::shape(format!("{} predictions for {} labels", preds.len(), labels.len())));
    }
    let mut cm = ConfusionMatrix::zeros(num_classes);
    for (&p, &t) in preds.iter().zip(labels) {
        cm.add(t, p)?;
    }
    Ok(cm)
}

/// The R_K statistic over the full matrix; 0 when a denominator factor
/// vanishes.
pub fn mcc_multiclass(cm: &ConfusionMatrix) -> Result<f64> {
    let s = cm.total();
    if s == 0 {
        return Err(Error::invalid("MCC of an empty confusion matrix"));
    }
    let c = cm.num_classes();
    let s = s as f64;
    let trace: f64 = (0..c).map(|k| cm.counts[k][k] as f64).sum();
    let t: Vec<f64> = cm.counts.iter().map(|r| r.iter().sum::<u64>() as f64).collect();
    let p: Vec<f64> = (0..c).map(|k| cm.counts.iter().map(|r| r[k]).sum::<u64>() as f64).collect();
    let tp: f64 = t.iter().zip(&p).map(|(a, b)| a * b).sum();
    let pp: f64 = p.iter().map(|v| v * v).sum();
    let tt: f64 = t.iter().map(|v| v * v).sum();
    let den = (s * s - pp) * (s * s - tt);
    if den <= 0.0 {
        return Ok(0.0);
    }
    Ok(((trace * s - tp) / den.sqrt()).clamp(-1.0, 1.0))
}

/// Binary MCC of a 2x2 matrix laid out `[[TN, FP], [FN, TP]]`.
pub fn mcc_binary(cm: &ConfusionMatrix) -> Result<f64> {
    if cm.num_classes() != 2 {
        return Err(Error::shape("binary MCC needs a 2x2 matrix"));
    }
    let [tn, fp] = [cm.counts[0][0] as f64, cm.counts[0][1] as f64];
    let [fn_, tp] = [cm.counts[1][0] as f64, cm.counts[1][1] as f64];
    Ok(mcc_from_counts(tp, tn, fp, fn_))
}

pub fn mcc_from_counts(tp: f64, tn: f64, fp: f64, fn_: f64) -> f64 {
    let den = (tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_);
    if den == 0.0 {
        return 0.0;
    }
    ((tp * tn - fp * fn_) / den.sqrt()).clamp(-1.0, 1.0)
}

/// One-vs-rest binary MCC per class.
pub fn per_class_mcc(cm: &ConfusionMatrix) -> Vec<f64> {
    (0..cm.num_classes())
        .map(|k| mcc_binary(&cm.binarize(k)).expect("binarized matrix is 2x2"))
        .collect()
}

/// Validation predictions of one fold.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPredictions {
    pub ids: Vec<u64>,
    pub labels: Vec<usize>,
    pub preds: Vec<usize>,
}

/// Pools all folds into one confusion matrix. Fails if a datapoint id is
/// scored by more than one fold.
pub fn aggregate_folds(folds: &[FoldPredictions], num_classes: usize) -> Result<ConfusionMatrix> {
    let mut seen = HashSet::new();
    let mut cm = ConfusionMatrix::zeros(num_classes);
    for f in folds {
        if f.ids.len() != f.labels.len() || f.ids.len() != f.preds.len() {
            return Err(Error::shape("fold ids, labels and predictions differ in length"));
        }
        for &id in &f.ids {
            if !seen.insert(id) {
                return Err(Error::invalid(format!("folds overlap on datapoint {id}")));
            }
        }
        cm.merge(&confusion(&f.preds, &f.labels, num_classes)?)?;
    }
    Ok(cm)
}

/// Serialized metrics report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mcc_multiclass: f64,
    pub per_class: BTreeMap<String, f64>,
    pub confusion: Vec<Vec<u64>>,
    pub n: u64,
}

impl MetricsReport {
    pub fn from_confusion(cm: &ConfusionMatrix, class_names: &[String]) -> Result<Self> {
        if class_names.len() != cm.num_classes() {
            return Err(Error::shape("class name count must equal the matrix size"));
        }
        Ok(Self {
            mcc_multiclass: mcc_multiclass(cm)?,
            per_class: class_names.iter().cloned().zip(per_class_mcc(cm)).collect(),
            confusion: cm.counts.clone(),
            n: cm.total(),
        })
    }
}
