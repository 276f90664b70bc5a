//! Macro-averaged evaluation metrics: confusion matrix, per-class F1 and
//! top-k accuracy.
//!
//! Macro means run over the classes present in the evaluation data (truth or
//! predictions for F1, truth for top-k); zero-division resolves to 0. Top-k
//! ranking breaks probability ties by ascending class id, so degenerate
//! uniform models evaluate deterministically.

use serde::Serialize;
use thiserror::Error;

#[derive(Error, Debug)]
pub enum MetricsError {
    #[error("empty input")]
    Empty,
    #[error("truth and prediction lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("class id {id} out of range for {n_classes} classes")]
    IdOutOfRange { id: usize, n_classes: usize },
    #[error("k = {k} must lie in [1, {n_classes}]")]
    BadK { k: usize, n_classes: usize },
}

/// Entry (i, j) counts samples with truth i predicted as j.
pub fn confusion_matrix(
    truth: &[usize],
    pred: &[usize],
    n_classes: usize,
) -> Result<Vec<u64>, MetricsError> {
    if truth.len() != pred.len() {
        return Err(MetricsError::LengthMismatch(truth.len(), pred.len()));
    }
    if truth.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut m = vec![0u64; n_classes * n_classes];
    for (&t, &p) in truth.iter().zip(pred) {
        if t >= n_classes {
            return Err(MetricsError::IdOutOfRange {
                id: t,
                n_classes,
            });
        }
        if p >= n_classes {
            return Err(MetricsError::IdOutOfRange {
                id: p,
                n_classes,
            });
        }
        m[t * n_classes + p] += 1;
    }
    Ok(m)
}

/// Per-class F1 from a confusion matrix: `2PR/(P+R)` with zero-division → 0.
/// Classes absent from both truth and predictions yield `None`.
pub fn per_class_f1(confusion: &[u64], n_classes: usize) -> Vec<Option<f64>> {
    (0..n_classes)
        .map(|c| {
            let tp = confusion[c * n_classes + c];
            let truth_total: u64 = (0..n_classes).map(|j| confusion[c * n_classes + j]).sum();
            let pred_total: u64 = (0..n_classes).map(|i| confusion[i * n_classes + c]).sum();
            if truth_total == 0 && pred_total == 0 {
                return None;
            }
            let p = if pred_total > 0 {
                tp as f64 / pred_total as f64
            } else {
                0.0
            };
            let r = if truth_total > 0 {
                tp as f64 / truth_total as f64
            } else {
                0.0
            };
            Some(if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 })
        })
        .collect()
}

/// Macro F1 over the classes present in truth or predictions.
pub fn f1_macro(truth: &[usize], pred: &[usize], n_classes: usize) -> Result<f64, MetricsError> {
    let confusion = confusion_matrix(truth, pred, n_classes)?;
    let per_class = per_class_f1(&confusion, n_classes);
    let present: Vec<f64> = per_class.into_iter().flatten().collect();
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}

/// True iff class `c` ranks among the top `k` of `row` with ties broken by
/// ascending class id.
#[inline]
fn in_top_k(row: &[f64], c: usize, k: usize) -> bool {
    let pc = row[c];
    let mut ahead = 0usize;
    for (j, &p) in row.iter().enumerate() {
        if p > pc || (p == pc && j < c) {
            ahead += 1;
            if ahead >= k {
                return false;
            }
        }
    }
    true
}

/// Macro top-k accuracy: per class present in truth, the fraction of its
/// samples whose true label ranks in the k most probable classes, averaged
/// with equal class weight.
pub fn topk_acc_macro(
    truth: &[usize],
    probs: &[f64],
    n_classes: usize,
    k: usize,
) -> Result<f64, MetricsError> {
    if truth.is_empty() {
        return Err(MetricsError::Empty);
    }
    if probs.len() != truth.len() * n_classes {
        return Err(MetricsError::LengthMismatch(
            probs.len(),
            truth.len() * n_classes,
        ));
    }
    if k == 0 || k > n_classes {
        return Err(MetricsError::BadK { k, n_classes });
    }
    let mut total = vec![0u64; n_classes];
    let mut hit = vec![0u64; n_classes];
    for (i, &t) in truth.iter().enumerate() {
        if t >= n_classes {
            return Err(MetricsError::IdOutOfRange {
                id: t,
                n_classes,
            });
        }
        total[t] += 1;
        if in_top_k(&probs[i * n_classes..(i + 1) * n_classes], t, k) {
            hit[t] += 1;
        }
    }
    let mut acc = 0.0f64;
    let mut present = 0usize;
    for c in 0..n_classes {
        if total[c] > 0 {
            acc += hit[c] as f64 / total[c] as f64;
            present += 1;
        }
    }
    Ok(acc / present as f64)
}

/// Arg-max predictions from probability rows (ties → lowest class id).
pub fn argmax_predictions(probs: &[f64], n_classes: usize) -> Vec<usize> {
    probs
        .chunks(n_classes)
        .map(|row| {
            let mut best = 0usize;
            for (j, &p) in row.iter().enumerate() {
                if p > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct MetricsReport {
    pub n_classes: usize,
    pub n_samples: usize,
    /// Row-major `n_classes × n_classes`, rows are ground truth.
    pub confusion: Vec<Vec<u64>>,
    /// Per-class F1; classes absent from truth and predictions are null.
    pub per_class_f1: Vec<Option<f64>>,
    pub f1_macro: f64,
    pub top1_acc_macro: f64,
    pub top3_acc_macro: f64,
    pub top5_acc_macro: f64,
}

impl MetricsReport {
    /// Compute the full report from probability rows (`n_samples × n_classes`).
    pub fn from_probs(
        truth: &[usize],
        probs: &[f64],
        n_classes: usize,
    ) -> Result<Self, MetricsError> {
        let pred = argmax_predictions(probs, n_classes);
        let flat = confusion_matrix(truth, &pred, n_classes)?;
        let per_class = per_class_f1(&flat, n_classes);
        let present: Vec<f64> = per_class.iter().copied().flatten().collect();
        let f1 = present.iter().sum::<f64>() / present.len() as f64;
        let topk = |k: usize| -> Result<f64, MetricsError> {
            topk_acc_macro(truth, probs, n_classes, k.min(n_classes))
        };
        Ok(MetricsReport {
            n_classes,
            n_samples: truth.len(),
            confusion: flat
                .chunks(n_classes)
                .map(|row| row.to_vec())
                .collect(),
            per_class_f1: per_class,
            f1_macro: f1,
            top1_acc_macro: topk(1)?,
            top3_acc_macro: topk(3)?,
            top5_acc_macro: topk(5)?,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Human-readable summary table.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("samples: {}\n", self.n_samples));
        s.push_str(&format!("f1_macro:        {:7.4}\n", self.f1_macro));
        s.push_str(&format!("top1_acc_macro:  {:7.4}\n", self.top1_acc_macro));
        s.push_str(&format!("top3_acc_macro:  {:7.4}\n", self.top3_acc_macro));
        s.push_str(&format!("top5_acc_macro:  {:7.4}\n", self.top5_acc_macro));
        s
    }
}
