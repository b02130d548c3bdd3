use serde::{Deserialize, Serialize};

use crate::text::Label;

/// Validation report. The positive class is `discriminatory`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierMetrics {
    pub loss: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Mean training loss of the final epoch.
    pub training_loss: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub true_positive: usize,
    pub false_positive: usize,
    pub true_negative: usize,
    pub false_negative: usize,
}

impl Confusion {
    pub fn from_pairs(gold: &[Label], predicted: &[Label]) -> Self {
        let mut c = Confusion::default();
        for (&g, &p) in gold.iter().zip(predicted) {
            match (g, p) {
                (Label::Discriminatory, Label::Discriminatory) => c.true_positive += 1,
                (Label::Neutral, Label::Discriminatory) => c.false_positive += 1,
                (Label::Neutral, Label::Neutral) => c.true_negative += 1,
                (Label::Discriminatory, Label::Neutral) => c.false_negative += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.true_positive + self.false_positive + self.true_negative + self.false_negative
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl ClassifierMetrics {
    /// Metrics from a confusion matrix; undefined ratios are reported as 0.
    pub fn from_confusion(c: &Confusion, loss: f64, training_loss: f64) -> Self {
        let precision = ratio(c.true_positive, c.true_positive + c.false_positive);
        let recall = ratio(c.true_positive, c.true_positive + c.false_negative);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        ClassifierMetrics {
            loss,
            accuracy: ratio(c.true_positive + c.true_negative, c.total()),
            precision,
            recall,
            f1,
            training_loss,
        }
    }
}
