use serde::{Deserialize, Serialize};

use crate::error::{EmoqError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

/// Confusion matrix (rows = truth, columns = prediction) and the metrics
/// derived from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub confusion: Vec<Vec<u64>>,
    /// Overall accuracy.
    pub wa: f64,
    /// Mean recall over classes present in the truth.
    pub ua: f64,
    /// Support-weighted F1.
    pub wf1: f64,
    pub per_class: Vec<ClassMetrics>,
}

impl MetricsReport {
    /// Derive every metric from a square confusion matrix.
    pub fn from_confusion(confusion: Vec<Vec<u64>>) -> Result<Self> {
        let c = confusion.len();
        if c == 0 || confusion.iter().any(|r| r.len() != c) {
            return Err(EmoqError::InvalidArgument("confusion matrix must be square and non-empty".into()));
        }
        let total: u64 = confusion.iter().flatten().sum();
        if total == 0 {
            return Err(EmoqError::InvalidArgument("metrics need at least one sample".into()));
        }
        let correct: u64 = (0..c).map(|i| confusion[i][i]).sum();
        let mut per_class = Vec::with_capacity(c);
        for k in 0..c {
            let tp = confusion[k][k] as f64;
            let support: u64 = confusion[k].iter().sum();
            let predicted: u64 = confusion.iter().map(|r| r[k]).sum();
            let ratio = |num: f64, den: u64| if den == 0 { 0.0 } else { num / den as f64 };
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            per_class.push(ClassMetrics {
                precision,
                recall,
                f1,
                support,
            });
        }
        let present: Vec<&ClassMetrics> = per_class.iter().filter(|m| m.support > 0).collect();
        if present.len() < c {
            log::warn!(
                "{} of {c} classes have no true samples; they are left out of UA",
                c - present.len()
            );
        }
        let ua = present.iter().map(|m| m.recall).sum::<f64>() / present.len() as f64;
        let wf1 = per_class.iter().map(|m| m.support as f64 * m.f1).sum::<f64>() / total as f64;
        Ok(Self {
            wa: correct as f64 / total as f64,
            ua,
            wf1,
            per_class,
            confusion,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.confusion.len()
    }

    pub fn total(&self) -> u64 {
        self.confusion.iter().flatten().sum()
    }
}

/// Build the confusion matrix and its metrics.
pub fn compute_metrics(predicted: &[usize], truth: &[usize], classes: usize) -> Result<MetricsReport> {
    if predicted.len() != truth.len() {
        return Err(EmoqError::shape(
            "compute_metrics",
            format!("{} predictions", truth.len()),
            format!("{} predictions", predicted.len()),
        ));
    }
    if truth.is_empty() {
        return Err(EmoqError::InvalidArgument("metrics need at least one sample".into()));
    }
    let mut confusion = vec![vec![0u64; classes]; classes];
    for (&p, &t) in predicted.iter().zip(truth) {
        if p >= classes || t >= classes {
            return Err(EmoqError::InvalidArgument(format!(
                "label pair ({t}, {p}) outside {classes} classes"
            )));
        }
        confusion[t][p] += 1;
    }
    MetricsReport::from_confusion(confusion)
}
