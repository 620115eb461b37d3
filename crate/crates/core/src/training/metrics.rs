//! Confusion counts, threshold metrics and ROC-AUC.

use crate::model::DECISION_THRESHOLD;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    /// Counts from 0/1 labels and predictions.
    pub fn from_labels(labels: &[u8], preds: &[u8]) -> Self {
        let mut c = Confusion::default();
        for (&y, &p) in labels.iter().zip(preds) {
            match (y != 0, p != 0) {
                (true, true) => c.tp += 1,
                (false, true) => c.fp += 1,
                (false, false) => c.tn += 1,
                (true, false) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// `num / den`, or 0 when the denominator is 0.
fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub f1: f64,
    pub roc_auc: f64,
    pub confusion: Confusion,
}

pub const METRIC_NAMES: [&str; 5] = ["acc", "sen", "spec", "f1", "auc"];

impl Metrics {
    pub fn from_confusion(c: Confusion, roc_auc: f64) -> Self {
        Metrics {
            accuracy: ratio(c.tp + c.tn, c.total()),
            sensitivity: ratio(c.tp, c.tp + c.fn_),
            specificity: ratio(c.tn, c.tn + c.fp),
            f1: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
            roc_auc,
            confusion: c,
        }
    }

    /// Thresholds `probs` at 0.5 and scores them against 0/1 `labels`.
    pub fn from_probs(probs: &[f64], labels: &[u8]) -> Self {
        let preds: Vec<u8> = probs.iter().map(|&p| u8::from(p >= DECISION_THRESHOLD)).collect();
        Self::from_confusion(Confusion::from_labels(labels, &preds), roc_auc(probs, labels))
    }

    /// `[acc, sen, spec, f1, auc]`.
    pub fn as_array(&self) -> [f64; 5] {
        [self.accuracy, self.sensitivity, self.specificity, self.f1, self.roc_auc]
    }
}

/// Area under the ROC curve by the trapezoid rule over every distinct
/// score, so tied scores contribute half. Returns 0.5 when only one class
/// is present.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let pos = labels.iter().filter(|&&y| y != 0).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return 0.5;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let (mut prev_tpr, mut prev_fpr) = (0.0, 0.0);
    let mut area = 0.0;
    let mut k = 0;
    while k < order.len() {
        let s = scores[order[k]];
        while k < order.len() && scores[order[k]] == s {
            if labels[order[k]] != 0 {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        let (tpr, fpr) = (tp as f64 / pos as f64, fp as f64 / neg as f64);
        area += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0;
        prev_tpr = tpr;
        prev_fpr = fpr;
    }
    area
}

/// Mean and population standard deviation of each metric column.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricStats {
    pub mean: [f64; 5],
    pub std: [f64; 5],
}

impl MetricStats {
    pub fn of(rows: &[[f64; 5]]) -> Self {
        let n = rows.len().max(1) as f64;
        let mut mean = [0.0; 5];
        let mut std = [0.0; 5];
        for j in 0..5 {
            mean[j] = rows.iter().map(|r| r[j]).sum::<f64>() / n;
            std[j] = (rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n).sqrt();
        }
        MetricStats { mean, std }
    }
}
