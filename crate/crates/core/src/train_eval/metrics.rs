use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segmentation::Label;

/// Rows are true classes, columns predicted classes, both in [`Label`]
/// index order (LK, LLC, RLC).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; 3]; 3],
}

impl ConfusionMatrix {
    pub fn new() -> ConfusionMatrix {
        ConfusionMatrix::default()
    }

    pub fn from_counts(counts: [[u64; 3]; 3]) -> ConfusionMatrix {
        ConfusionMatrix { counts }
    }

    pub fn record(&mut self, truth: Label, predicted: Label) {
        self.counts[truth.index()][predicted.index()] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Diagonal sum, `A + E + I`.
    pub fn correct(&self) -> u64 {
        (0..3).map(|k| self.counts[k][k]).sum()
    }

    /// Correctly classified lane changes, `E + I`.
    pub fn correct_lane_changes(&self) -> u64 {
        self.counts[1][1] + self.counts[2][2]
    }

    pub fn row_total(&self, k: usize) -> u64 {
        self.counts[k].iter().sum()
    }

    pub fn column_total(&self, k: usize) -> u64 {
        self.counts.iter().map(|r| r[k]).sum()
    }
}

/// Percentage of correctly classified samples.
pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::EmptyMatrix);
    }
    Ok(100.0 * cm.correct() as f64 / total as f64)
}

/// Train accuracy minus test accuracy, in percentage points.
pub fn delta_acc(train_acc: f64, test_acc: f64) -> f64 {
    train_acc - test_acc
}

/// Per-class recall, precision and F1 in percent. A ratio with a zero
/// denominator is reported as 0 and the class is flagged as degenerate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub recall: [f64; 3],
    pub precision: [f64; 3],
    pub f1: [f64; 3],
    pub degenerate: [bool; 3],
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| 100.0 * num as f64 / den as f64)
}

pub fn per_class_metrics(cm: &ConfusionMatrix) -> ClassMetrics {
    let mut m = ClassMetrics::default();
    for k in 0..3 {
        let tp = cm.counts[k][k];
        let re = ratio(tp, cm.row_total(k));
        let pr = ratio(tp, cm.column_total(k));
        m.recall[k] = re.unwrap_or(0.0);
        m.precision[k] = pr.unwrap_or(0.0);
        let sum = m.recall[k] + m.precision[k];
        m.f1[k] = if sum > 0.0 {
            2.0 * m.recall[k] * m.precision[k] / sum
        } else {
            0.0
        };
        m.degenerate[k] = re.is_none() || pr.is_none();
    }
    m
}
