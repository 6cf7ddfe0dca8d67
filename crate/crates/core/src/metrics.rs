//! Confusion matrices, threshold metrics and ROC analysis for the binary
//! task. The positive class is label 1 (Tumor).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub fp: usize,
    pub tn: usize,
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.tp + self.fn_ + self.fp + self.tn
    }
}

/// Tallies predictions, predicting 1 iff `prob >= threshold`.
pub fn confusion(labels: &[u8], probs: &[f64], threshold: f64) -> Result<ConfusionMatrix> {
    if labels.len() != probs.len() {
        return Err(Error::dim(format!(
            "{} labels but {} scores",
            labels.len(),
            probs.len()
        )));
    }
    let mut cm = ConfusionMatrix::default();
    for (&y, &p) in labels.iter().zip(probs) {
        match (y == 1, p >= threshold) {
            (true, true) => cm.tp += 1,
            (true, false) => cm.fn_ += 1,
            (false, true) => cm.fp += 1,
            (false, false) => cm.tn += 1,
        }
    }
    Ok(cm)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub specificity: f64,
    /// Metrics whose denominator was zero; they are reported as 0.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub undefined: Vec<String>,
}

impl Metrics {
    pub fn is_defined(&self, name: &str) -> bool {
        !self.undefined.iter().any(|n| n == name)
    }
}

pub fn metrics_from_confusion(cm: &ConfusionMatrix) -> Result<Metrics> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::contract("metrics of an empty confusion matrix"));
    }
    let mut undefined = Vec::new();
    let mut ratio = |name: &str, num: usize, den: usize| {
        if den == 0 {
            undefined.push(name.to_string());
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let accuracy = ratio("accuracy", cm.tp + cm.tn, total);
    let precision = ratio("precision", cm.tp, cm.tp + cm.fp);
    let recall = ratio("recall", cm.tp, cm.tp + cm.fn_);
    let specificity = ratio("specificity", cm.tn, cm.tn + cm.fp);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        undefined.push("f1".to_string());
        0.0
    };
    Ok(Metrics {
        accuracy,
        precision,
        recall,
        f1,
        specificity,
        undefined,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// Scores `>= threshold` are called positive; `+inf` for the origin.
    pub threshold: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

/// ROC curve over every distinct score, with trapezoidal AUC.
pub fn roc_auc(labels: &[u8], scores: &[f64]) -> Result<RocCurve> {
    if labels.len() != scores.len() {
        return Err(Error::dim(format!(
            "{} labels but {} scores",
            labels.len(),
            scores.len()
        )));
    }
    let positives = labels.iter().filter(|&&y| y == 1).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::contract("ROC analysis needs both classes present"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::contract("ROC scores contain NaN"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let (p, n) = (positives as f64, negatives as f64);
    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            fpr: fp as f64 / n,
            tpr: tp as f64 / p,
            threshold,
        });
    }
    let auc = points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum();
    Ok(RocCurve { points, auc })
}

/// The metrics JSON document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub specificity: f64,
    pub auc: f64,
    pub confusion: ConfusionMatrix,
    pub threshold: f64,
}

impl MetricsReport {
    pub fn new(metrics: &Metrics, roc: &RocCurve, confusion: ConfusionMatrix, threshold: f64) -> Self {
        MetricsReport {
            accuracy: metrics.accuracy,
            precision: metrics.precision,
            recall: metrics.recall,
            f1: metrics.f1,
            specificity: metrics.specificity,
            auc: roc.auc,
            confusion,
            threshold,
        }
    }
}

/// ROC points as `fpr,tpr,threshold` CSV.
pub fn roc_csv(roc: &RocCurve) -> String {
    let mut s = String::from("fpr,tpr,threshold\n");
    for p in &roc.points {
        s.push_str(&format!("{},{},{}\n", p.fpr, p.tpr, p.threshold));
    }
    s
}
