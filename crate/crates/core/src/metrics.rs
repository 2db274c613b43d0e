//! Classification metrics over relation labels.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// `confusion[gold][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    /// Label excluded from P/R/F1, if any.
    pub excluded: Option<usize>,
}

pub fn f1_score(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Micro-averaged P/R/F1. With `excluded = Some(none)` a prediction counts
/// toward precision only when it is not `none`, and a gold label toward
/// recall only when it is not `none`; with `None` every label counts and
/// P = R = accuracy.
pub fn compute_metrics(
    predictions: &[usize],
    gold: &[usize],
    classes: usize,
    excluded: Option<usize>,
) -> Result<MetricsReport> {
    if predictions.len() != gold.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} gold labels",
            predictions.len(),
            gold.len()
        )));
    }
    let mut confusion = vec![vec![0usize; classes]; classes];
    let mut correct = 0;
    let mut tp = 0;
    let mut predicted_pos = 0;
    let mut gold_pos = 0;
    for (&p, &g) in predictions.iter().zip(gold) {
        if p >= classes || g >= classes {
            return Err(Error::Contract(format!("label index outside {classes} classes")));
        }
        confusion[g][p] += 1;
        let counts = |x: usize| excluded != Some(x);
        if p == g {
            correct += 1;
            if counts(g) {
                tp += 1;
            }
        }
        if counts(p) {
            predicted_pos += 1;
        }
        if counts(g) {
            gold_pos += 1;
        }
    }
    let precision = ratio(tp, predicted_pos);
    let recall = ratio(tp, gold_pos);
    Ok(MetricsReport {
        accuracy: ratio(correct, gold.len()),
        precision,
        recall,
        f1: f1_score(precision, recall),
        confusion,
        excluded,
    })
}

impl MetricsReport {
    /// Recomputes accuracy, precision and recall from the confusion matrix.
    pub fn from_confusion(&self) -> (f64, f64, f64) {
        let c = &self.confusion;
        let n: usize = c.iter().flatten().sum();
        let correct: usize = (0..c.len()).map(|i| c[i][i]).sum();
        let counts = |x: usize| self.excluded != Some(x);
        let tp: usize = (0..c.len()).filter(|&i| counts(i)).map(|i| c[i][i]).sum();
        let pred_pos: usize = (0..c.len())
            .filter(|&j| counts(j))
            .map(|j| c.iter().map(|row| row[j]).sum::<usize>())
            .sum();
        let gold_pos: usize = (0..c.len()).filter(|&i| counts(i)).map(|i| c[i].iter().sum::<usize>()).sum();
        (ratio(correct, n), ratio(tp, pred_pos), ratio(tp, gold_pos))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let g = [1, 2, 0, 3];
        let m = compute_metrics(&g, &g, 4, Some(0)).unwrap();
        assert_eq!((m.accuracy, m.precision, m.recall, m.f1), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn all_none_predictions() {
        let m = compute_metrics(&[0, 0, 0], &[1, 2, 1], 3, Some(0)).unwrap();
        assert_eq!((m.recall, m.f1), (0.0, 0.0));
    }

    #[test]
    fn confusion_arithmetic() {
        // TP on instance 0, FN on 1, FP on 2, true negative on 3
        let m = compute_metrics(&[1, 0, 1, 0], &[1, 2, 0, 0], 3, Some(0)).unwrap();
        assert_eq!((m.precision, m.recall, m.f1), (0.5, 0.5, 0.5));
        assert_eq!(m.accuracy, 0.5);
        assert_eq!(m.from_confusion(), (m.accuracy, m.precision, m.recall));
    }

    #[test]
    fn include_none_mode() {
        let m = compute_metrics(&[1, 0, 1, 0], &[1, 2, 0, 0], 3, None).unwrap();
        assert_eq!((m.precision, m.recall), (0.5, 0.5));
    }

    #[test]
    fn length_mismatch() {
        assert!(matches!(compute_metrics(&[0], &[0, 1], 2, None), Err(Error::Contract(_))));
    }
}
