//! Confusion matrices and accuracy / precision / recall / F1.
//!
//! Recall is `tp / (tp + fn)`. Precision or recall with a zero denominator
//! is reported as 0 and a warning is attached to the report.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn correct(&self) -> u64 {
        self.tp + self.tn
    }

    pub fn misclassified(&self) -> u64 {
        self.fp + self.fn_
    }

    /// The same predictions scored with the other class as positive.
    pub fn swapped(&self) -> ConfusionMatrix {
        ConfusionMatrix {
            tp: self.tn,
            fp: self.fn_,
            tn: self.tp,
            fn_: self.fp,
        }
    }
}

/// Tallies predictions against ground truth for the given positive label.
pub fn confusion(predictions: &[usize], truths: &[usize], positive: usize) -> Result<ConfusionMatrix> {
    if predictions.len() != truths.len() {
        return Err(Error::LengthMismatch {
            left: predictions.len(),
            right: truths.len(),
        });
    }
    if predictions.is_empty() {
        return Err(Error::Empty("prediction list"));
    }
    let mut cm = ConfusionMatrix::default();
    for (&p, &t) in predictions.iter().zip(truths) {
        match (p == positive, t == positive) {
            (true, true) => cm.tp += 1,
            (true, false) => cm.fp += 1,
            (false, false) => cm.tn += 1,
            (false, true) => cm.fn_ += 1,
        }
    }
    Ok(cm)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AveragingMode {
    /// Scores of the positive class only.
    Binary,
    /// Unweighted mean of both classes' scores.
    Macro,
    /// Support-weighted mean of both classes' scores.
    #[default]
    Weighted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub averaging_mode: AveragingMode,
    pub confusion: ConfusionMatrix,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl MetricReport {
    /// True when the stored metrics are exactly what the stored confusion matrix yields.
    pub fn is_consistent(&self) -> bool {
        compute_metrics(&self.confusion, self.averaging_mode)
            .map(|r| {
                r.accuracy == self.accuracy
                    && r.precision == self.precision
                    && r.recall == self.recall
                    && r.f1 == self.f1
            })
            .unwrap_or(false)
    }
}

fn ratio(num: u64, den: u64, what: &str, warnings: &mut Vec<String>) -> f64 {
    if den == 0 {
        warnings.push(format!("{what} has a zero denominator; reported as 0"));
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Harmonic mean of precision and recall, 0 when both are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

struct ClassScores {
    precision: f64,
    recall: f64,
    f1: f64,
    support: u64,
}

fn class_scores(cm: &ConfusionMatrix, name: &str, warnings: &mut Vec<String>) -> ClassScores {
    let precision = ratio(cm.tp, cm.tp + cm.fp, &format!("{name} precision"), warnings);
    let recall = ratio(cm.tp, cm.tp + cm.fn_, &format!("{name} recall"), warnings);
    ClassScores {
        precision,
        recall,
        f1: f1_score(precision, recall),
        support: cm.tp + cm.fn_,
    }
}

pub fn compute_metrics(cm: &ConfusionMatrix, mode: AveragingMode) -> Result<MetricReport> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Empty("confusion matrix"));
    }
    let mut warnings = Vec::new();
    let accuracy = cm.correct() as f64 / total as f64;
    let (precision, recall, f1) = match mode {
        AveragingMode::Binary => {
            let s = class_scores(cm, "positive-class", &mut warnings);
            (s.precision, s.recall, s.f1)
        }
        AveragingMode::Macro | AveragingMode::Weighted => {
            let pos = class_scores(cm, "positive-class", &mut warnings);
            let neg = class_scores(&cm.swapped(), "negative-class", &mut warnings);
            let (wp, wn) = if mode == AveragingMode::Macro {
                (0.5, 0.5)
            } else {
                (
                    pos.support as f64 / total as f64,
                    neg.support as f64 / total as f64,
                )
            };
            (
                wp * pos.precision + wn * neg.precision,
                wp * pos.recall + wn * neg.recall,
                wp * pos.f1 + wn * neg.f1,
            )
        }
    };
    Ok(MetricReport {
        accuracy,
        precision,
        recall,
        f1,
        averaging_mode: mode,
        confusion: *cm,
        warnings,
    })
}

/// Mean of a model's train and test accuracy.
pub fn average_accuracy(train_acc: f64, test_acc: f64) -> f64 {
    (train_acc + test_acc) / 2.0
}

/// Mean of train and test accuracy across two datasets.
pub fn cross_dataset_average(accuracies: [f64; 4]) -> f64 {
    accuracies.iter().sum::<f64>() / 4.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cm(tp: u64, fp: u64, tn: u64, fn_: u64) -> ConfusionMatrix {
        ConfusionMatrix { tp, fp, tn, fn_ }
    }

    #[test]
    fn perfect_classifier() {
        let truths: Vec<usize> = (0..80).map(|i| i / 40).collect();
        let c = confusion(&truths, &truths, 0).unwrap();
        assert_eq!(c, cm(40, 0, 40, 0));
        for mode in [AveragingMode::Binary, AveragingMode::Macro, AveragingMode::Weighted] {
            let r = compute_metrics(&c, mode).unwrap();
            assert_eq!((r.accuracy, r.precision, r.recall, r.f1), (1.0, 1.0, 1.0, 1.0));
        }
    }

    #[test]
    fn length_mismatch_and_empty_input() {
        assert!(matches!(confusion(&[0], &[0, 1], 0), Err(Error::LengthMismatch { .. })));
        assert!(confusion(&[], &[], 0).is_err());
        assert!(compute_metrics(&ConfusionMatrix::default(), AveragingMode::Binary).is_err());
    }

    #[test]
    fn hand_evaluated_matrix() {
        let r = compute_metrics(&cm(36, 4, 36, 4), AveragingMode::Binary).unwrap();
        assert_eq!(r.accuracy, 0.9);
        assert_eq!(r.precision, 0.9);
        assert_eq!(r.recall, 0.9);
        assert!((r.f1 - 0.9).abs() < 1e-15);
    }

    #[test]
    fn zero_denominator_is_flagged() {
        // Never predicts positive: precision undefined.
        let r = compute_metrics(&cm(0, 0, 30, 10), AveragingMode::Binary).unwrap();
        assert_eq!(r.precision, 0.0);
        assert_eq!(r.f1, 0.0);
        assert_eq!(r.warnings.len(), 1);
    }

    #[test]
    fn recall_uses_false_negatives_not_printed_denominator() {
        // The printed recall formula tp/(tn+fp) would give 40/20 = 2.0 here,
        // which is not a rate. Recall is the share of positives recovered.
        let c = cm(40, 10, 10, 0);
        let r = compute_metrics(&c, AveragingMode::Binary).unwrap();
        assert_eq!(r.recall, 1.0);
        let printed = c.tp as f64 / (c.tn + c.fp) as f64;
        assert_eq!(printed, 2.0);
    }

    #[test]
    fn swapping_positive_class_changes_binary_scores_not_accuracy() {
        let c = cm(30, 10, 35, 5);
        let a = compute_metrics(&c, AveragingMode::Binary).unwrap();
        let b = compute_metrics(&c.swapped(), AveragingMode::Binary).unwrap();
        assert_eq!(a.accuracy, b.accuracy);
        assert_ne!(a.precision, b.precision);
        assert_ne!(a.recall, b.recall);
        assert_ne!(a.f1, b.f1);
    }

    #[test]
    fn weighted_mode_by_hand() {
        // positive: P = 30/40, R = 30/35; negative: P = 35/40, R = 35/45
        let r = compute_metrics(&cm(30, 10, 35, 5), AveragingMode::Weighted).unwrap();
        let (wp, wn) = (35.0 / 80.0, 45.0 / 80.0);
        let p = wp * 0.75 + wn * 0.875;
        let rec = wp * (30.0 / 35.0) + wn * (35.0 / 45.0);
        assert!((r.precision - p).abs() < 1e-15);
        assert!((r.recall - rec).abs() < 1e-15);
        // weighted recall equals accuracy for a binary problem
        assert!((r.recall - r.accuracy).abs() < 1e-15);
    }

    #[test]
    fn misclassification_counts_map_to_accuracy() {
        for (wrong, acc) in [(8, 0.90), (36, 0.55), (0, 1.0)] {
            let c = cm(40 - wrong / 2, wrong - wrong / 2, 40 - (wrong - wrong / 2), wrong / 2);
            assert_eq!(c.total(), 80);
            assert_eq!(c.correct(), 80 - wrong);
            let r = compute_metrics(&c, AveragingMode::Weighted).unwrap();
            assert!((r.accuracy - acc).abs() < 1e-12);
        }
    }

    #[test]
    fn reference_averages() {
        assert!((average_accuracy(0.85, 0.86) - 0.855).abs() < 1e-12);
        assert!((cross_dataset_average([1.0, 1.0, 0.9, 0.9]) - 0.95).abs() < 1e-12);
        assert_eq!(average_accuracy(0.37, 0.37), 0.37);
    }

    proptest! {
        #[test]
        fn report_recomputes_from_confusion(tp in 0u64..50, fp in 0u64..50, tn in 0u64..50, fn_ in 0u64..50) {
            prop_assume!(tp + fp + tn + fn_ > 0);
            for mode in [AveragingMode::Binary, AveragingMode::Macro, AveragingMode::Weighted] {
                let r = compute_metrics(&cm(tp, fp, tn, fn_), mode).unwrap();
                prop_assert!(r.is_consistent());
                for v in [r.accuracy, r.precision, r.recall, r.f1] {
                    prop_assert!((0.0..=1.0).contains(&v));
                }
            }
        }

        #[test]
        fn f1_equals_common_value(p in 0.0f64..=1.0) {
            prop_assert!((f1_score(p, p) - p).abs() < 1e-15);
        }
    }
}
