//! Classification scoring: accuracy plus macro-averaged precision, recall,
//! and F1 from a per-class confusion tally.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-class confusion tallies over a prediction/truth pairing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    /// Class ids present in the truth labels, ascending.
    pub classes: Vec<usize>,
    pub true_positive: Vec<usize>,
    pub false_positive: Vec<usize>,
    pub false_negative: Vec<usize>,
    pub true_negative: Vec<usize>,
    pub total: usize,
}

impl ConfusionCounts {
    pub fn tally(predictions: &[usize], truth: &[usize]) -> Result<ConfusionCounts> {
        if predictions.is_empty() {
            return Err(Error::EmptyInput("no predictions to score".into()));
        }
        if predictions.len() != truth.len() {
            return Err(Error::Dimension(format!(
                "{} predictions vs {} truth labels",
                predictions.len(),
                truth.len()
            )));
        }
        // Macro averaging runs over classes present in truth only; spurious
        // predicted classes still count as false positives elsewhere.
        let classes: Vec<usize> = truth.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
        let mut counts = ConfusionCounts {
            true_positive: vec![0; classes.len()],
            false_positive: vec![0; classes.len()],
            false_negative: vec![0; classes.len()],
            true_negative: vec![0; classes.len()],
            classes,
            total: predictions.len(),
        };
        for (ci, &c) in counts.classes.iter().enumerate() {
            for (&p, &t) in predictions.iter().zip(truth.iter()) {
                match (p == c, t == c) {
                    (true, true) => counts.true_positive[ci] += 1,
                    (true, false) => counts.false_positive[ci] += 1,
                    (false, true) => counts.false_negative[ci] += 1,
                    (false, false) => counts.true_negative[ci] += 1,
                }
            }
        }
        Ok(counts)
    }
}

/// Accuracy and macro precision/recall/F1, all in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
}

impl MetricsReport {
    /// Four-column row formatted to four decimals, matching the report table.
    pub fn table_cells(&self) -> [String; 4] {
        [
            format!("{:.4}", self.accuracy),
            format!("{:.4}", self.macro_precision),
            format!("{:.4}", self.macro_recall),
            format!("{:.4}", self.macro_f1),
        ]
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    // Zero-denominator convention: an absent prediction or truth side
    // contributes zero, never NaN.
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Score predictions against truth. Macro metrics are unweighted means of
/// per-class values over the classes present in truth; macro F1 is the mean
/// of per-class F1 scores, not the F1 of the macro precision/recall.
pub fn score(predictions: &[usize], truth: &[usize]) -> Result<MetricsReport> {
    let counts = ConfusionCounts::tally(predictions, truth)?;
    let correct = predictions
        .iter()
        .zip(truth.iter())
        .filter(|(p, t)| p == t)
        .count();
    let k = counts.classes.len() as f64;
    let mut macro_p = 0.0;
    let mut macro_r = 0.0;
    let mut macro_f1 = 0.0;
    for ci in 0..counts.classes.len() {
        let tp = counts.true_positive[ci];
        let p = ratio(tp, tp + counts.false_positive[ci]);
        let r = ratio(tp, tp + counts.false_negative[ci]);
        let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        macro_p += p;
        macro_r += r;
        macro_f1 += f1;
    }
    Ok(MetricsReport {
        accuracy: correct as f64 / counts.total as f64,
        macro_precision: macro_p / k,
        macro_recall: macro_r / k,
        macro_f1: macro_f1 / k,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_predictions_score_one() {
        let truth = vec![0, 1, 1, 0, 1];
        let report = score(&truth, &truth).unwrap();
        assert_eq!(report.accuracy, 1.0);
        assert_eq!(report.macro_precision, 1.0);
        assert_eq!(report.macro_recall, 1.0);
        assert_eq!(report.macro_f1, 1.0);
        assert_eq!(
            report.table_cells(),
            ["1.0000", "1.0000", "1.0000", "1.0000"]
        );
    }

    #[test]
    fn majority_vote_on_13_11_split() {
        // 24 samples, 13 of class 0 and 11 of class 1, predicting all 0.
        let mut truth = vec![0usize; 13];
        truth.extend(vec![1usize; 11]);
        let predictions = vec![0usize; 24];
        let report = score(&predictions, &truth).unwrap();
        assert_eq!(
            report.table_cells(),
            ["0.5417", "0.2708", "0.5000", "0.3514"]
        );
    }

    #[test]
    fn total_miss_scores_zero() {
        let report = score(&[0, 1], &[1, 0]).unwrap();
        assert_eq!(report.accuracy, 0.0);
        assert_eq!(report.macro_f1, 0.0);
    }

    #[test]
    fn four_sample_mixed_case_matches_hand_tally() {
        // pred: [0, 1, 1, 0], truth: [0, 1, 0, 1]
        // class 0: TP=1 FP=1 FN=1 -> P=0.5 R=0.5 F1=0.5
        // class 1: TP=1 FP=1 FN=1 -> P=0.5 R=0.5 F1=0.5
        let report = score(&[0, 1, 1, 0], &[0, 1, 0, 1]).unwrap();
        assert_eq!(report.accuracy, 0.5);
        assert_eq!(report.macro_precision, 0.5);
        assert_eq!(report.macro_recall, 0.5);
        assert_eq!(report.macro_f1, 0.5);
    }

    #[test]
    fn length_mismatch_and_empty_are_errors() {
        assert!(matches!(score(&[0], &[0, 1]), Err(Error::Dimension(_))));
        assert!(matches!(score(&[], &[]), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn confusion_counts_are_consistent() {
        let counts = ConfusionCounts::tally(&[0, 1, 1, 0, 1], &[0, 0, 1, 1, 1]).unwrap();
        for ci in 0..counts.classes.len() {
            assert_eq!(
                counts.true_positive[ci]
                    + counts.false_positive[ci]
                    + counts.false_negative[ci]
                    + counts.true_negative[ci],
                counts.total
            );
        }
    }

    proptest! {
        #[test]
        fn joint_permutation_preserves_report(
            pairs in prop::collection::vec((0usize..2, 0usize..2), 1..40),
            seed in 0u64..1000
        ) {
            let predictions: Vec<usize> = pairs.iter().map(|p| p.0).collect();
            let truth: Vec<usize> = pairs.iter().map(|p| p.1).collect();
            let base = score(&predictions, &truth).unwrap();

            // Deterministic Fisher-Yates on the index set.
            let mut idx: Vec<usize> = (0..pairs.len()).collect();
            let mut state = seed.wrapping_add(1);
            for i in (1..idx.len()).rev() {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                let j = (state >> 33) as usize % (i + 1);
                idx.swap(i, j);
            }
            let sp: Vec<usize> = idx.iter().map(|&i| predictions[i]).collect();
            let st: Vec<usize> = idx.iter().map(|&i| truth[i]).collect();
            prop_assert_eq!(score(&sp, &st).unwrap(), base);
        }

        #[test]
        fn class_swap_preserves_macro_metrics(
            pairs in prop::collection::vec((0usize..2, 0usize..2), 1..40)
        ) {
            let predictions: Vec<usize> = pairs.iter().map(|p| p.0).collect();
            let truth: Vec<usize> = pairs.iter().map(|p| p.1).collect();
            prop_assume!(truth.contains(&0) && truth.contains(&1));
            let base = score(&predictions, &truth).unwrap();
            let swapped_p: Vec<usize> = predictions.iter().map(|&p| 1 - p).collect();
            let swapped_t: Vec<usize> = truth.iter().map(|&t| 1 - t).collect();
            let swapped = score(&swapped_p, &swapped_t).unwrap();
            prop_assert!((base.accuracy - swapped.accuracy).abs() < 1e-12);
            prop_assert!((base.macro_precision - swapped.macro_precision).abs() < 1e-12);
            prop_assert!((base.macro_recall - swapped.macro_recall).abs() < 1e-12);
            prop_assert!((base.macro_f1 - swapped.macro_f1).abs() < 1e-12);
        }

        #[test]
        fn accuracy_equals_micro_recall_for_binary_complete_labeling(
            pairs in prop::collection::vec((0usize..2, 0usize..2), 1..40)
        ) {
            let predictions: Vec<usize> = pairs.iter().map(|p| p.0).collect();
            let truth: Vec<usize> = pairs.iter().map(|p| p.1).collect();
            let counts = ConfusionCounts::tally(&predictions, &truth).unwrap();
            let report = score(&predictions, &truth).unwrap();
            let tp: usize = counts.true_positive.iter().sum();
            let fn_: usize = counts.false_negative.iter().sum();
            let micro_recall = tp as f64 / (tp + fn_) as f64;
            prop_assert!((report.accuracy - micro_recall).abs() < 1e-12);
        }
    }
}
