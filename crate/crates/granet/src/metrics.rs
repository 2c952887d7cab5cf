//! Confusion-matrix accounting and the five evaluation measures:
//! per-class precision/recall/F1, overall accuracy, and average F1.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::pointcloud::ClassMap;

/// Square count matrix; rows are true classes, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: Vec<u64>,
    classes: usize,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            counts: vec![0; classes * classes],
            classes,
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn count(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accumulate(&mut self, truth: &[usize], predicted: &[usize]) -> Result<()> {
        if truth.len() != predicted.len() {
            return Err(Error::Contract(format!(
                "{} truth labels vs {} predictions",
                truth.len(),
                predicted.len()
            )));
        }
        for (&t, &p) in truth.iter().zip(predicted) {
            if t >= self.classes || p >= self.classes {
                return Err(Error::Contract(format!(
                    "label pair ({t}, {p}) out of range for {} classes",
                    self.classes
                )));
            }
            self.counts[t * self.classes + p] += 1;
        }
        Ok(())
    }

    /// Elementwise merge of per-tile matrices.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::Contract(format!(
                "merging {}-class matrix into {}-class matrix",
                other.classes, self.classes
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

/// Per-class and aggregate evaluation measures, all in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
    pub oa: f64,
    /// Unweighted mean F1 over classes with at least one true or predicted
    /// instance.
    pub avg_f1: f64,
    /// Per class: did it appear at all (true or predicted)?
    pub present: Vec<bool>,
}

/// Derives the report from a confusion matrix. Ratios with zero
/// denominators are reported as 0.
pub fn report(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Contract("empty confusion matrix".into()));
    }
    let c = cm.classes();
    let mut precision = vec![0.0; c];
    let mut recall = vec![0.0; c];
    let mut f1 = vec![0.0; c];
    let mut present = vec![false; c];
    let mut trace = 0u64;
    for i in 0..c {
        let tp = cm.count(i, i);
        trace += tp;
        let true_count: u64 = (0..c).map(|j| cm.count(i, j)).sum();
        let pred_count: u64 = (0..c).map(|j| cm.count(j, i)).sum();
        present[i] = true_count + pred_count > 0;
        precision[i] = if pred_count > 0 {
            tp as f64 / pred_count as f64
        } else {
            0.0
        };
        recall[i] = if true_count > 0 {
            tp as f64 / true_count as f64
        } else {
            0.0
        };
        f1[i] = if precision[i] + recall[i] > 0.0 {
            2.0 * precision[i] * recall[i] / (precision[i] + recall[i])
        } else {
            0.0
        };
    }
    let oa = trace as f64 / total as f64;
    let present_count = present.iter().filter(|&&p| p).count();
    let avg_f1 = if present_count > 0 {
        f1.iter()
            .zip(&present)
            .filter(|(_, &p)| p)
            .map(|(v, _)| v)
            .sum::<f64>()
            / present_count as f64
    } else {
        0.0
    };
    Ok(MetricsReport {
        precision,
        recall,
        f1,
        oa,
        avg_f1,
        present,
    })
}

impl MetricsReport {
    /// Human-readable table.
    pub fn to_table(&self, classes: &ClassMap) -> String {
        let mut s = String::new();
        let name_w = classes
            .names()
            .iter()
            .map(String::len)
            .max()
            .unwrap_or(5)
            .max(5);
        writeln!(
            s,
            "{:<name_w$}  {:>9}  {:>9}  {:>9}",
            "class", "precision", "recall", "f1"
        )
        .unwrap();
        for i in 0..classes.count() {
            writeln!(
                s,
                "{:<name_w$}  {:>9.4}  {:>9.4}  {:>9.4}",
                classes.name(i),
                self.precision[i],
                self.recall[i],
                self.f1[i]
            )
            .unwrap();
        }
        writeln!(s, "{:<name_w$}  {:>9.4}", "OA", self.oa).unwrap();
        writeln!(s, "{:<name_w$}  {:>9.4}", "AvgF1", self.avg_f1).unwrap();
        s
    }

    /// Comma-separated form: header, one row per class, then OA and AvgF1
    /// summary rows, all values with 4 fractional digits.
    pub fn to_csv(&self, classes: &ClassMap) -> String {
        let mut s = String::from("class,precision,recall,f1\n");
        for i in 0..classes.count() {
            writeln!(
                s,
                "{},{:.4},{:.4},{:.4}",
                classes.name(i),
                self.precision[i],
                self.recall[i],
                self.f1[i]
            )
            .unwrap();
        }
        writeln!(s, "OA,{:.4}", self.oa).unwrap();
        writeln!(s, "AvgF1,{:.4}", self.avg_f1).unwrap();
        s
    }
}
