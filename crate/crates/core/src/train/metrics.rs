//! Confusion matrices and the per-class metric suite.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `cm[t][p]` counts samples of true class `t` predicted as `p`.
pub fn confusion_matrix(preds: &[usize], targets: &[usize], num_classes: usize) -> Result<Vec<Vec<u64>>> {
    if preds.len() != targets.len() {
        return Err(Error::dim("confusion_matrix", &[preds.len()], &[targets.len()]));
    }
    let mut cm = vec![vec![0u64; num_classes]; num_classes];
    for (&p, &t) in preds.iter().zip(targets) {
        if p >= num_classes || t >= num_classes {
            return Err(Error::contract(format!(
                "class index out of range (pred {p}, target {t}, {num_classes} classes)"
            )));
        }
        cm[t][p] += 1;
    }
    Ok(cm)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    /// Names of the metrics above whose denominator was zero; those are
    /// reported as 0.
    pub undefined_flags: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub confusion_matrix: Vec<Vec<u64>>,
    pub per_class: Vec<ClassMetrics>,
    pub accuracy: f64,
    /// Mean recall over classes that have at least one true sample.
    pub balanced_accuracy: f64,
}

fn ratio(num: u64, den: u64, name: &str, flags: &mut Vec<String>) -> f64 {
    if den == 0 {
        flags.push(name.to_string());
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl MetricsReport {
    pub fn from_confusion(cm: Vec<Vec<u64>>, labels: &[String]) -> Result<Self> {
        let c = cm.len();
        if labels.len() != c || cm.iter().any(|r| r.len() != c) {
            return Err(Error::contract(format!(
                "confusion matrix must be {0}×{0} for {0} labels",
                labels.len()
            )));
        }
        let total: u64 = cm.iter().flatten().sum();
        if total == 0 {
            return Err(Error::contract("metrics need at least one sample"));
        }
        let trace: u64 = (0..c).map(|i| cm[i][i]).sum();
        let mut per_class = Vec::with_capacity(c);
        let mut recalls = Vec::new();
        for k in 0..c {
            let tp = cm[k][k];
            let support: u64 = cm[k].iter().sum();
            let predicted: u64 = cm.iter().map(|r| r[k]).sum();
            let fn_ = support - tp;
            let fp = predicted - tp;
            let tn = total - tp - fn_ - fp;
            let mut flags = Vec::new();
            let precision = ratio(tp, tp + fp, "precision", &mut flags);
            let recall = ratio(tp, tp + fn_, "recall", &mut flags);
            let sensitivity = recall;
            if support == 0 {
                flags.push("sensitivity".to_string());
            } else {
                recalls.push(recall);
            }
            let specificity = ratio(tn, tn + fp, "specificity", &mut flags);
            let f1 = if flags.iter().any(|f| f == "precision" || f == "recall") || precision + recall == 0.0 {
                flags.push("f1".to_string());
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            per_class.push(ClassMetrics {
                label: labels[k].clone(),
                precision,
                recall,
                f1,
                sensitivity,
                specificity,
                undefined_flags: flags,
            });
        }
        Ok(MetricsReport {
            accuracy: trace as f64 / total as f64,
            balanced_accuracy: recalls.iter().sum::<f64>() / recalls.len() as f64,
            confusion_matrix: cm,
            per_class,
        })
    }

    pub fn from_predictions(preds: &[usize], targets: &[usize], labels: &[String]) -> Result<Self> {
        Self::from_confusion(confusion_matrix(preds, targets, labels.len())?, labels)
    }

    pub fn total(&self) -> u64 {
        self.confusion_matrix.iter().flatten().sum()
    }

    /// Human-readable table followed by the confusion matrix. Undefined
    /// values are marked with `*`.
    pub fn to_text(&self) -> String {
        let width = self.per_class.iter().map(|m| m.label.len()).max().unwrap_or(5).max(5);
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:width$}  {:>9} {:>9} {:>9} {:>11} {:>11}",
            "Class", "Recall", "Precision", "F1-Score", "Specificity", "Sensitivity"
        );
        for m in &self.per_class {
            let cell = |v: f64, name: &str| {
                let mark = if m.undefined_flags.iter().any(|f| f == name) { "*" } else { "" };
                format!("{v:.4}{mark}")
            };
            let _ = writeln!(
                s,
                "{:width$}  {:>9} {:>9} {:>9} {:>11} {:>11}",
                m.label,
                cell(m.recall, "recall"),
                cell(m.precision, "precision"),
                cell(m.f1, "f1"),
                cell(m.specificity, "specificity"),
                cell(m.sensitivity, "sensitivity"),
            );
        }
        let _ = writeln!(s, "\nAccuracy           {:.4}", self.accuracy);
        let _ = writeln!(s, "Balanced accuracy  {:.4}", self.balanced_accuracy);
        let _ = writeln!(s, "\nConfusion matrix (rows = true, columns = predicted)");
        let _ = write!(s, "{:width$}", "");
        for m in &self.per_class {
            let _ = write!(s, " {:>w$}", m.label, w = m.label.len().max(6));
        }
        s.push('\n');
        for (m, row) in self.per_class.iter().zip(&self.confusion_matrix) {
            let _ = write!(s, "{:width$}", m.label);
            for (h, v) in self.per_class.iter().zip(row) {
                let _ = write!(s, " {:>w$}", v, w = h.label.len().max(6));
            }
            s.push('\n');
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn diagonal_is_perfect() {
        let r = MetricsReport::from_confusion(vec![vec![5, 0], vec![0, 5]], &labels(2)).unwrap();
        assert_eq!(r.accuracy, 1.0);
        for m in &r.per_class {
            assert_eq!((m.precision, m.recall, m.f1, m.specificity), (1.0, 1.0, 1.0, 1.0));
            assert!(m.undefined_flags.is_empty());
        }
    }

    #[test]
    fn hand_evaluated_binary_case() {
        // Positive class 1: TP = 8, FN = 2, FP = 1, TN = 9.
        let r = MetricsReport::from_confusion(vec![vec![9, 1], vec![2, 8]], &labels(2)).unwrap();
        let m = &r.per_class[1];
        assert!((m.sensitivity - 0.8).abs() < 1e-12);
        assert!((m.specificity - 0.9).abs() < 1e-12);
        assert!((m.precision - 8.0 / 9.0).abs() < 1e-12);
        assert!((m.f1 - 0.842_105_263_157_894_7).abs() < 1e-12);
        assert!((r.accuracy - 0.85).abs() < 1e-12);
        assert!((r.balanced_accuracy - 0.85).abs() < 1e-12);
    }

    #[test]
    fn degenerate_predictor_flags_instead_of_nan() {
        // Everything predicted as class 0; 3 of 10 samples are class 0.
        let preds = vec![0; 10];
        let targets: Vec<usize> = (0..10).map(|i| usize::from(i >= 3)).collect();
        let r = MetricsReport::from_predictions(&preds, &targets, &labels(2)).unwrap();
        assert!((r.per_class[0].precision - 0.3).abs() < 1e-12);
        assert_eq!(r.per_class[1].recall, 0.0);
        assert_eq!(r.per_class[1].precision, 0.0);
        assert!(r.per_class[1].undefined_flags.contains(&"precision".to_string()));
        let json = serde_json::to_string(&r).unwrap();
        assert!(!json.contains("NaN") && !json.contains("null"));
    }

    #[test]
    fn single_off_diagonal_sample() {
        let cm = confusion_matrix(&[0], &[1], 3).unwrap();
        assert_eq!(cm, vec![vec![0, 0, 0], vec![1, 0, 0], vec![0, 0, 0]]);
        assert!(confusion_matrix(&[3], &[0], 3).is_err());
        assert!(confusion_matrix(&[0, 1], &[0], 3).is_err());
    }

    #[test]
    fn argmax_ties_pick_lowest() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[2.0f32, 2.0]), 0);
    }

    #[test]
    fn text_report_has_column_names() {
        let r = MetricsReport::from_confusion(vec![vec![9, 1], vec![2, 8]], &labels(2)).unwrap();
        let t = r.to_text();
        for col in ["Recall", "Precision", "F1-Score", "Specificity", "Sensitivity"] {
            assert!(t.contains(col));
        }
    }
}
