use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub macro_f1: f64,
    /// F1 of the positive class; present for two-class tasks only.
    pub binary_f1: Option<f64>,
    pub per_class: Vec<ClassStats>,
    /// `confusion[truth][prediction]`.
    pub confusion: Vec<Vec<usize>>,
    pub wall_seconds: f64,
}

impl EvalReport {
    /// Metric used to pick the best epoch: binary F1 when there is one,
    /// accuracy otherwise.
    pub fn selection_metric(&self) -> f64 {
        self.binary_f1.unwrap_or(self.accuracy)
    }

    pub fn total(&self) -> usize {
        self.confusion.iter().flatten().sum()
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Accuracy, per-class precision/recall/F1 and macro-F1. A class with
/// `P + R = 0` scores F1 = 0.
pub fn evaluate_predictions(predictions: &[usize], labels: &[usize], num_classes: usize, positive: usize) -> EvalReport {
    assert_eq!(predictions.len(), labels.len());
    let mut confusion = vec![vec![0usize; num_classes]; num_classes];
    for (&p, &y) in predictions.iter().zip(labels) {
        confusion[y][p] += 1;
    }
    let correct: usize = (0..num_classes).map(|c| confusion[c][c]).sum();
    let per_class: Vec<ClassStats> = (0..num_classes)
        .map(|c| {
            let tp = confusion[c][c];
            let predicted: usize = confusion.iter().map(|row| row[c]).sum();
            let support: usize = confusion[c].iter().sum();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassStats {
                precision,
                recall,
                f1,
                support,
            }
        })
        .collect();
    let macro_f1 = per_class.iter().map(|s| s.f1).sum::<f64>() / num_classes as f64;
    EvalReport {
        accuracy: ratio(correct, labels.len()),
        macro_f1,
        binary_f1: (num_classes == 2).then(|| per_class[positive].f1),
        per_class,
        confusion,
        wall_seconds: 0.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let y = [0, 1, 1, 0, 1];
        let r = evaluate_predictions(&y, &y, 2, 1);
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.macro_f1, 1.0);
        assert_eq!(r.binary_f1, Some(1.0));
    }

    #[test]
    fn constant_positive_prediction_on_balanced_set() {
        let y = [0, 1, 0, 1];
        let r = evaluate_predictions(&[1, 1, 1, 1], &y, 2, 1);
        assert_eq!(r.accuracy, 0.5);
        // P = 1/2, R = 1.
        assert!((r.binary_f1.unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.per_class[0].f1, 0.0);
    }

    #[test]
    fn confusion_rows_match_supports() {
        let y = [0, 2, 1, 2, 2, 0];
        let p = [0, 1, 1, 2, 0, 2];
        let r = evaluate_predictions(&p, &y, 3, 0);
        assert_eq!(r.binary_f1, None);
        for (c, row) in r.confusion.iter().enumerate() {
            assert_eq!(row.iter().sum::<usize>(), y.iter().filter(|&&v| v == c).count());
        }
        assert_eq!(r.total(), 6);
    }
}
