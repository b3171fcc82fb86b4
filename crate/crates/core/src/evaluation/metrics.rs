use serde::{Deserialize, Serialize};

use super::EvalError;

/// Which F1 average a report's headline figure uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum F1Average {
    /// Per-class F1 weighted by support.
    #[default]
    Weighted,
    /// Unweighted mean over classes that occur in labels or predictions.
    Macro,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub weighted_f1: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassMetrics>,
    /// `confusion[label][prediction]`.
    pub confusion: Vec<Vec<usize>>,
}

impl MetricsReport {
    pub fn f1(&self, average: F1Average) -> f64 {
        match average {
            F1Average::Weighted => self.weighted_f1,
            F1Average::Macro => self.macro_f1,
        }
    }

    pub fn total(&self) -> usize {
        self.confusion.iter().flatten().sum()
    }
}

pub fn compute_metrics(predictions: &[usize], labels: &[usize], classes: usize) -> Result<MetricsReport, EvalError> {
    if predictions.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            predictions: predictions.len(),
            labels: labels.len(),
        });
    }
    if labels.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut confusion = vec![vec![0usize; classes]; classes];
    for (&p, &l) in predictions.iter().zip(labels) {
        if p >= classes || l >= classes {
            return Err(EvalError::ClassOutOfRange {
                class: p.max(l),
                classes,
            });
        }
        confusion[l][p] += 1;
    }
    let total = labels.len();
    let correct: usize = (0..classes).map(|c| confusion[c][c]).sum();
    let mut per_class = Vec::with_capacity(classes);
    let mut weighted = 0.0;
    let mut macro_sum = 0.0;
    let mut macro_n = 0usize;
    for c in 0..classes {
        let tp = confusion[c][c];
        let support: usize = confusion[c].iter().sum();
        let predicted: usize = (0..classes).map(|l| confusion[l][c]).sum();
        let precision = if predicted == 0 { 0.0 } else { tp as f64 / predicted as f64 };
        let recall = if support == 0 { 0.0 } else { tp as f64 / support as f64 };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        weighted += support as f64 * f1;
        if support > 0 || predicted > 0 {
            macro_sum += f1;
            macro_n += 1;
        }
        per_class.push(ClassMetrics {
            precision,
            recall,
            f1,
            support,
        });
    }
    Ok(MetricsReport {
        accuracy: correct as f64 / total as f64,
        weighted_f1: weighted / total as f64,
        macro_f1: macro_sum / macro_n as f64,
        per_class,
        confusion,
    })
}
