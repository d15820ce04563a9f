//! Accuracy, per-class precision/recall and macro F1.
//!
//! `macro_f1` is the harmonic mean of the macro-averaged precision and recall.
//! The more common mean of per-class F1 scores is reported separately as
//! `macro_f1_classwise`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Counts indexed `[gold][predicted]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            counts: vec![vec![0; num_classes]; num_classes],
        }
    }

    pub fn from_pairs(preds: &[usize], golds: &[usize], num_classes: usize) -> Result<Self> {
        if preds.len() != golds.len() {
            return Err(Error::Input(format!(
                "{} predictions for {} gold labels",
                preds.len(),
                golds.len()
            )));
        }
        if preds.is_empty() {
            return Err(Error::Input("no predictions to evaluate".into()));
        }
        let mut cm = Self::new(num_classes);
        for (i, (&p, &g)) in preds.iter().zip(golds).enumerate() {
            if p >= num_classes || g >= num_classes {
                return Err(Error::Input(format!(
                    "label out of range at index {i}: gold {g}, predicted {p}, {num_classes} classes"
                )));
            }
            cm.counts[g][p] += 1;
        }
        Ok(cm)
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn get(&self, gold: usize, pred: usize) -> u64 {
        self.counts[gold][pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn true_positives(&self, class: usize) -> u64 {
        self.counts[class][class]
    }

    /// Predicted as `class` but gold is another class.
    pub fn false_positives(&self, class: usize) -> u64 {
        (0..self.num_classes())
            .filter(|&g| g != class)
            .map(|g| self.counts[g][class])
            .sum()
    }

    /// Gold is `class` but predicted as another class.
    pub fn false_negatives(&self, class: usize) -> u64 {
        (0..self.num_classes())
            .filter(|&p| p != class)
            .map(|p| self.counts[class][p])
            .sum()
    }

    pub fn rows(&self) -> &[Vec<u64>] {
        &self.counts
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub precision_mean: f64,
    pub recall_mean: f64,
    pub macro_f1: f64,
    pub macro_f1_classwise: f64,
    pub total: u64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

pub fn compute_report(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    let total = cm.total();
    let m = cm.num_classes();
    if total == 0 || m == 0 {
        return Err(Error::Input("cannot report on an empty confusion matrix".into()));
    }
    let tp_sum: u64 = (0..m).map(|c| cm.true_positives(c)).sum();
    let precision: Vec<f64> = (0..m)
        .map(|c| ratio(cm.true_positives(c), cm.true_positives(c) + cm.false_positives(c)))
        .collect();
    let recall: Vec<f64> = (0..m)
        .map(|c| ratio(cm.true_positives(c), cm.true_positives(c) + cm.false_negatives(c)))
        .collect();
    let precision_mean = precision.iter().sum::<f64>() / m as f64;
    let recall_mean = recall.iter().sum::<f64>() / m as f64;
    let macro_f1_classwise = precision
        .iter()
        .zip(&recall)
        .map(|(&p, &r)| harmonic(p, r))
        .sum::<f64>()
        / m as f64;
    Ok(MetricsReport {
        accuracy: ratio(tp_sum, total),
        macro_f1: harmonic(precision_mean, recall_mean),
        precision,
        recall,
        precision_mean,
        recall_mean,
        macro_f1_classwise,
        total,
    })
}

/// Confusion matrix and report in one step.
pub fn evaluate(preds: &[usize], golds: &[usize], num_classes: usize) -> Result<MetricsReport> {
    compute_report(&ConfusionMatrix::from_pairs(preds, golds, num_classes)?)
}
