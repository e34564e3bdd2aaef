//! Classification metrics over scored binary predictions.

use super::EvalRecord;
use crate::annotator::LabelLogits;
use crate::Label;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricError {
    #[error("no records")]
    EmptyInput,
    #[error("need at least one positive and one negative (got {positives} positive, {negatives} negative)")]
    DegenerateClasses { positives: usize, negatives: usize },
    #[error("no positive records")]
    NoPositives,
    #[error("record {index} has no score")]
    MissingScore { index: usize },
    #[error("record {index} has score {score}, outside [0, 1]")]
    InvalidScore { index: usize, score: f64 },
    #[error("label logits must be finite (yes = {yes}, no = {no})")]
    NonFiniteLogit { yes: f64, no: f64 },
}

/// Probability of the positive label from the two label-token logits:
/// `e^yes / (e^yes + e^no)`, computed after subtracting the larger logit.
pub fn label_probability(logits: LabelLogits) -> Result<f64, MetricError> {
    let LabelLogits { yes, no } = logits;
    if !(yes.is_finite() && no.is_finite()) {
        return Err(MetricError::NonFiniteLogit { yes, no });
    }
    let m = yes.max(no);
    let (ey, en) = ((yes - m).exp(), (no - m).exp());
    Ok(ey / (ey + en))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn from_records(records: &[EvalRecord]) -> Self {
        let mut c = Confusion::default();
        for r in records {
            match (r.predicted_label, r.human_label) {
                (Label::Positive, Label::Positive) => c.tp += 1,
                (Label::Positive, Label::Negative) => c.fp += 1,
                (Label::Negative, Label::Positive) => c.fn_ += 1,
                (Label::Negative, Label::Negative) => c.tn += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

pub fn accuracy(records: &[EvalRecord]) -> Result<f64, MetricError> {
    if records.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    let c = Confusion::from_records(records);
    Ok((c.tp + c.tn) as f64 / c.total() as f64)
}

/// F1 of the positive class; 0 when precision and recall are both 0 or undefined.
pub fn f1(records: &[EvalRecord]) -> Result<f64, MetricError> {
    if records.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    let c = Confusion::from_records(records);
    // 2PR/(P+R) simplifies to 2TP/(2TP+FP+FN).
    let denom = 2 * c.tp + c.fp + c.fn_;
    Ok(if c.tp == 0 {
        0.0
    } else {
        (2 * c.tp) as f64 / denom as f64
    })
}

/// `(is_positive, score)` pairs, rejecting missing or out-of-range scores.
pub fn scored(records: &[EvalRecord]) -> Result<Vec<(bool, f64)>, MetricError> {
    records
        .iter()
        .enumerate()
        .map(|(index, r)| {
            let score = r.score.ok_or(MetricError::MissingScore { index })?;
            if !(0.0..=1.0).contains(&score) {
                return Err(MetricError::InvalidScore { index, score });
            }
            Ok((r.human_label.is_positive(), score))
        })
        .collect()
}

/// Sorts by descending score and returns `(positives, negatives)` per group of equal scores.
fn tie_groups(points: &[(bool, f64)]) -> Vec<(usize, usize)> {
    let mut sorted: Vec<(bool, f64)> = points.to_vec();
    sorted.sort_by(|a, b| b.1.total_cmp(&a.1));
    let mut groups: Vec<(usize, usize)> = Vec::new();
    let mut prev: Option<f64> = None;
    for (pos, score) in sorted {
        if prev != Some(score) {
            groups.push((0, 0));
            prev = Some(score);
        }
        let g = groups.last_mut().expect("pushed above");
        if pos {
            g.0 += 1;
        } else {
            g.1 += 1;
        }
    }
    groups
}

/// Mann–Whitney AUC with ties counted half. Exact: the pair count is accumulated in
/// integers and divided once.
pub fn roc_auc_points(points: &[(bool, f64)]) -> Result<f64, MetricError> {
    let positives = points.iter().filter(|p| p.0).count();
    let negatives = points.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(MetricError::DegenerateClasses { positives, negatives });
    }
    // Twice the number of (pos, neg) pairs ranked correctly, ties counting one.
    let mut doubled: u128 = 0;
    let mut neg_below = negatives as u128;
    for (p, n) in tie_groups(points) {
        neg_below -= n as u128;
        doubled += 2 * p as u128 * neg_below + p as u128 * n as u128;
    }
    Ok(doubled as f64 / (2 * positives as u128 * negatives as u128) as f64)
}

pub fn roc_auc(records: &[EvalRecord]) -> Result<f64, MetricError> {
    roc_auc_points(&scored(records)?)
}

/// Highest precision among thresholds (one per distinct score, predicting positive at or
/// above it) whose recall is at least `target`.
pub fn precision_at_recall_points(points: &[(bool, f64)], target: f64) -> Result<f64, MetricError> {
    let positives = points.iter().filter(|p| p.0).count();
    if positives == 0 {
        return Err(MetricError::NoPositives);
    }
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut best: f64 = 0.0;
    for (p, n) in tie_groups(points) {
        tp += p;
        fp += n;
        if meets_recall(tp, positives, target) {
            best = best.max(tp as f64 / (tp + fp) as f64);
        }
    }
    Ok(best)
}

/// `tp / positives >= target`, with a small allowance for `target` written in decimal.
pub fn meets_recall(tp: usize, positives: usize, target: f64) -> bool {
    tp as f64 >= target * positives as f64 - 1e-9
}

pub fn precision_at_recall(records: &[EvalRecord], target: f64) -> Result<f64, MetricError> {
    precision_at_recall_points(&scored(records)?, target)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::EvalMode;
    use proptest::prelude::*;

    fn rec(human: bool, predicted: bool, score: Option<f64>) -> EvalRecord {
        EvalRecord {
            video_id: "v".into(),
            issue_id: "i".into(),
            human_label: Label::from_violation(human),
            predicted_label: Label::from_violation(predicted),
            score,
            explanation: None,
            mode: EvalMode::Sft,
        }
    }

    fn points(pos: &[f64], neg: &[f64]) -> Vec<(bool, f64)> {
        pos.iter()
            .map(|s| (true, *s))
            .chain(neg.iter().map(|s| (false, *s)))
            .collect()
    }

    fn pairwise(points: &[(bool, f64)]) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for p in points.iter().filter(|p| p.0) {
            for n in points.iter().filter(|p| !p.0) {
                den += 1.0;
                num += if p.1 > n.1 {
                    1.0
                } else if p.1 == n.1 {
                    0.5
                } else {
                    0.0
                };
            }
        }
        num / den
    }

    #[test]
    fn probability_examples() {
        let p = |yes, no| label_probability(LabelLogits { yes, no }).unwrap();
        assert_eq!(p(0.3, 0.3), 0.5);
        assert!((p(2.0, -2.0) - 1.0 / (1.0 + (-4.0f64).exp())).abs() < 1e-15);
        assert!((p(2.0, -2.0) - 0.98201).abs() < 1e-5);
        let tiny = p(-1000.0, 1000.0);
        assert!((0.0..1e-300).contains(&tiny));
        assert!(label_probability(LabelLogits { yes: f64::NAN, no: 0.0 }).is_err());
        assert!(label_probability(LabelLogits {
            yes: f64::INFINITY,
            no: 0.0
        })
        .is_err());
    }

    #[test]
    fn confusion_example() {
        let mut records = Vec::new();
        records.extend((0..3).map(|_| rec(true, true, None)));
        records.push(rec(false, true, None));
        records.extend((0..2).map(|_| rec(true, false, None)));
        records.extend((0..4).map(|_| rec(false, false, None)));
        assert!((accuracy(&records).unwrap() - 0.7).abs() < 1e-15);
        assert!((f1(&records).unwrap() - 2.0 * 0.75 * 0.6 / 1.35).abs() < 1e-12);
        assert_eq!(f1(&[rec(true, false, None), rec(false, false, None)]).unwrap(), 0.0);
        assert_eq!(f1(&[rec(true, true, None), rec(false, false, None)]).unwrap(), 1.0);
        assert_eq!(accuracy(&[]), Err(MetricError::EmptyInput));
    }

    #[test]
    fn auc_examples() {
        assert_eq!(roc_auc_points(&points(&[0.9, 0.8], &[0.2, 0.1])).unwrap(), 1.0);
        assert_eq!(roc_auc_points(&points(&[0.5, 0.5], &[0.5, 0.5])).unwrap(), 0.5);
        assert_eq!(roc_auc_points(&points(&[0.7, 0.4], &[0.5, 0.4])).unwrap(), 0.625);
        assert!(matches!(
            roc_auc_points(&points(&[0.7], &[])),
            Err(MetricError::DegenerateClasses {
                positives: 1,
                negatives: 0
            })
        ));
        assert_eq!(
            roc_auc(&[rec(true, true, Some(0.2)), rec(false, false, None)]),
            Err(MetricError::MissingScore { index: 1 })
        );
        assert!(matches!(
            roc_auc(&[rec(true, true, Some(1.2))]),
            Err(MetricError::InvalidScore { .. })
        ));
    }

    #[test]
    fn precision_at_recall_examples() {
        let pr = |pos: &[f64], neg: &[f64], t| precision_at_recall_points(&points(pos, neg), t).unwrap();
        assert_eq!(pr(&[0.9, 0.8], &[0.2, 0.1], 0.9), 1.0);
        // full recall needs threshold 0.3, which admits 0.9, 0.8, 0.7 and 0.3: precision 3/4
        assert_eq!(pr(&[0.9, 0.8, 0.3], &[0.7, 0.2], 0.9), 0.75);
        // the 0.2 threshold also reaches full recall but only at 3/5
        assert_eq!(pr(&[0.9, 0.8, 0.3], &[0.7, 0.3, 0.2], 0.9), 0.6);
        assert_eq!(pr(&[0.9], &[0.5, 0.1], 0.9), 1.0);
        // target 1.0 with the only full-recall threshold at the minimum: prevalence
        assert_eq!(pr(&[0.1, 0.1], &[0.5, 0.3, 0.1], 1.0), 0.4);
        assert_eq!(pr(&[0.9, 0.1], &[0.5], 0.0), 1.0);
        assert_eq!(
            precision_at_recall_points(&points(&[], &[0.3]), 0.9),
            Err(MetricError::NoPositives)
        );
    }

    fn arb_points() -> impl Strategy<Value = Vec<(bool, f64)>> {
        prop::collection::vec((any::<bool>(), 0u8..20), 2..80)
            .prop_map(|v| v.into_iter().map(|(b, s)| (b, s as f64 / 19.0)).collect())
            .prop_filter("two classes", |v: &Vec<(bool, f64)>| {
                v.iter().any(|p| p.0) && v.iter().any(|p| !p.0)
            })
    }

    proptest! {
        #[test]
        fn auc_matches_pairwise(pts in arb_points()) {
            prop_assert!((roc_auc_points(&pts).unwrap() - pairwise(&pts)).abs() <= 1e-12);
        }

        #[test]
        fn auc_invariant_under_increasing_transform(pts in arb_points()) {
            let moved: Vec<(bool, f64)> = pts.iter().map(|(b, s)| (*b, (s * 3.0).exp() / 30.0)).collect();
            prop_assert_eq!(roc_auc_points(&pts).unwrap(), roc_auc_points(&moved).unwrap());
        }

        #[test]
        fn equal_logits_give_half(z in -700.0f64..700.0) {
            prop_assert_eq!(label_probability(LabelLogits { yes: z, no: z }).unwrap(), 0.5);
        }

        #[test]
        fn probability_increases_with_yes(a in -12.0f64..12.0, d in 0.01f64..5.0, no in -12.0f64..12.0) {
            let lo = label_probability(LabelLogits { yes: a, no }).unwrap();
            let hi = label_probability(LabelLogits { yes: a + d, no }).unwrap();
            prop_assert!(hi > lo);
        }

        #[test]
        fn recall_zero_is_best_precision(pts in arb_points()) {
            let mut best: f64 = 0.0;
            let mut thresholds: Vec<f64> = pts.iter().map(|p| p.1).collect();
            thresholds.sort_by(f64::total_cmp);
            thresholds.dedup();
            for t in thresholds {
                let tp = pts.iter().filter(|p| p.0 && p.1 >= t).count();
                let all = pts.iter().filter(|p| p.1 >= t).count();
                best = best.max(tp as f64 / all as f64);
            }
            prop_assert_eq!(precision_at_recall_points(&pts, 0.0).unwrap(), best);
        }
    }
}
