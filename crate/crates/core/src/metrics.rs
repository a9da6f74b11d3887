//! Classification metrics.
//!
//! Per-class precision/recall/F1 over the three labels plus the macro
//! average, which is the evaluation number of record everywhere else in
//! this crate.

use serde::{Deserialize, Serialize};

use crate::corpus::Label;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassF1 {
    pub label: Label,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// True when the class was never predicted and never gold; its F1
    /// is defined as 0 and still enters the macro average.
    pub absent: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct F1Report {
    /// Indexed by `Label::index()`.
    pub per_class: [ClassF1; 3],
    pub macro_f1: f64,
}

fn ratio(num: usize, denom: usize) -> f64 {
    if denom == 0 {
        0.0
    } else {
        num as f64 / denom as f64
    }
}

/// Confusion-matrix F1 per class and the unweighted macro mean.
pub fn f1_scores(predictions: &[Label], golds: &[Label]) -> Result<F1Report> {
    if predictions.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    if predictions.len() != golds.len() {
        return Err(Error::ShapeMismatch {
            op: "f1_scores",
            detail: format!(
                "{} predictions vs {} golds",
                predictions.len(),
                golds.len()
            ),
        });
    }
    let mut tp = [0usize; 3];
    let mut fp = [0usize; 3];
    let mut fn_ = [0usize; 3];
    for (&p, &g) in predictions.iter().zip(golds) {
        if p == g {
            tp[p.index()] += 1;
        } else {
            fp[p.index()] += 1;
            fn_[g.index()] += 1;
        }
    }
    let per_class = [Label::Aggression, Label::Loss, Label::Other].map(|label| {
        let i = label.index();
        let precision = ratio(tp[i], tp[i] + fp[i]);
        let recall = ratio(tp[i], tp[i] + fn_[i]);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        ClassF1 {
            label,
            tp: tp[i],
            fp: fp[i],
            fn_: fn_[i],
            precision,
            recall,
            f1,
            absent: tp[i] + fp[i] + fn_[i] == 0,
        }
    });
    let macro_f1 = per_class.iter().map(|c| c.f1).sum::<f64>() / 3.0;
    Ok(F1Report {
        per_class,
        macro_f1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const LABELS: [Label; 3] = [Label::Aggression, Label::Loss, Label::Other];

    #[test]
    fn perfect_predictions_score_one() {
        let golds = vec![Label::Aggression, Label::Loss, Label::Other, Label::Loss];
        let report = f1_scores(&golds, &golds).unwrap();
        for c in &report.per_class {
            assert_eq!(c.f1, 1.0);
            assert!(!c.absent);
        }
        assert_eq!(report.macro_f1, 1.0);
    }

    #[test]
    fn one_of_each_confusion_cell_gives_half() {
        // Aggression: TP=1 (a,a), FP=1 (predicted a, gold l), FN=1
        // (predicted l, gold a).
        let predictions = vec![
            Label::Aggression,
            Label::Aggression,
            Label::Loss,
            Label::Other,
        ];
        let golds = vec![Label::Aggression, Label::Loss, Label::Aggression, Label::Other];
        let report = f1_scores(&predictions, &golds).unwrap();
        let agg = &report.per_class[Label::Aggression.index()];
        assert_eq!((agg.tp, agg.fp, agg.fn_), (1, 1, 1));
        assert!((agg.f1 - 0.5).abs() < 1e-15);
    }

    #[test]
    fn absent_class_is_flagged_and_scored_zero() {
        let predictions = vec![Label::Aggression, Label::Loss];
        let golds = vec![Label::Aggression, Label::Loss];
        let report = f1_scores(&predictions, &golds).unwrap();
        let other = &report.per_class[Label::Other.index()];
        assert!(other.absent);
        assert_eq!(other.f1, 0.0);
        assert!((report.macro_f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn never_correct_class_scores_zero_without_absence() {
        let predictions = vec![Label::Loss, Label::Aggression];
        let golds = vec![Label::Aggression, Label::Loss];
        let report = f1_scores(&predictions, &golds).unwrap();
        let agg = &report.per_class[Label::Aggression.index()];
        assert_eq!(agg.f1, 0.0);
        assert!(!agg.absent);
    }

    #[test]
    fn empty_and_misaligned_inputs_are_rejected() {
        assert!(matches!(
            f1_scores(&[], &[]).unwrap_err(),
            Error::EmptyEvaluation
        ));
        assert!(matches!(
            f1_scores(&[Label::Other], &[Label::Other, Label::Loss]).unwrap_err(),
            Error::ShapeMismatch { op: "f1_scores", .. }
        ));
    }

    proptest! {
        #[test]
        fn macro_is_the_unweighted_mean(
            pairs in proptest::collection::vec((0usize..3, 0usize..3), 1..50)
        ) {
            let predictions: Vec<Label> = pairs.iter().map(|&(p, _)| LABELS[p]).collect();
            let golds: Vec<Label> = pairs.iter().map(|&(_, g)| LABELS[g]).collect();
            let report = f1_scores(&predictions, &golds).unwrap();
            let mean = report.per_class.iter().map(|c| c.f1).sum::<f64>() / 3.0;
            prop_assert!((report.macro_f1 - mean).abs() <= 1e-12);
            for c in &report.per_class {
                prop_assert!((0.0..=1.0).contains(&c.f1));
                prop_assert!((0.0..=1.0).contains(&c.precision));
                prop_assert!((0.0..=1.0).contains(&c.recall));
            }
        }

        #[test]
        fn f1_is_invariant_to_pair_order(
            pairs in proptest::collection::vec((0usize..3, 0usize..3), 2..30),
            swap in (0usize..29, 0usize..29),
        ) {
            let predictions: Vec<Label> = pairs.iter().map(|&(p, _)| LABELS[p]).collect();
            let golds: Vec<Label> = pairs.iter().map(|&(_, g)| LABELS[g]).collect();
            let a = f1_scores(&predictions, &golds).unwrap();
            let (i, j) = (swap.0 % pairs.len(), swap.1 % pairs.len());
            let mut sp = predictions.clone();
            let mut sg = golds.clone();
            sp.swap(i, j);
            sg.swap(i, j);
            let b = f1_scores(&sp, &sg).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
