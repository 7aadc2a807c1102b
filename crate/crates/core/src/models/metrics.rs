//! Binary classification metrics with class 1 (diabetic) as positive.

use serde::{Deserialize, Serialize};

use super::{ModelError, Prediction, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f_measure: f64,
    pub auc: f64,
    pub confusion: Confusion,
    /// (false positive rate, true positive rate), from (0,0) to (1,1).
    pub roc_points: Vec<(f64, f64)>,
}

impl EvalReport {
    /// Placeholder with every metric zero and no ROC points.
    pub fn empty() -> Self {
        EvalReport {
            accuracy: 0.0,
            precision: 0.0,
            recall: 0.0,
            f_measure: 0.0,
            auc: 0.0,
            confusion: Confusion::default(),
            roc_points: Vec::new(),
        }
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// AUC as the Mann–Whitney statistic using mid-ranks, so tied scores
/// count one half. Returns 0.5 when either class is absent.
pub fn auc_rank(scores: &[f64], labels: &[u8]) -> f64 {
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return 0.5;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their average
        let mid_rank = (i + j + 2) as f64 / 2.0;
        rank_sum_pos += mid_rank * order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let np = n_pos as f64;
    (rank_sum_pos - np * (np + 1.0) / 2.0) / (np * n_neg as f64)
}

/// ROC curve sweeping the threshold down through each distinct score.
pub fn roc_curve(scores: &[f64], labels: &[u8]) -> Vec<(f64, f64)> {
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return vec![(0.0, 0.0), (1.0, 1.0)];
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let score = scores[order[i]];
        while i < order.len() && scores[order[i]] == score {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / n_neg as f64, tp as f64 / n_pos as f64));
    }
    points
}

pub fn auc_trapezoid(points: &[(f64, f64)]) -> f64 {
    points.windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0).sum()
}

pub fn evaluate(predictions: &[Prediction], y_true: &[u8]) -> Result<EvalReport> {
    if predictions.len() != y_true.len() || predictions.is_empty() {
        return Err(ModelError::LengthMismatch { predictions: predictions.len(), labels: y_true.len() });
    }
    let mut c = Confusion::default();
    for (p, &t) in predictions.iter().zip(y_true) {
        match (p.label, t) {
            (1, 1) => c.tp += 1,
            (1, _) => c.fp += 1,
            (_, 1) => c.fn_ += 1,
            _ => c.tn += 1,
        }
    }
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let f_measure = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
    let scores: Vec<f64> = predictions.iter().map(Prediction::positive).collect();
    Ok(EvalReport {
        accuracy: ratio(c.tp + c.tn, c.total()),
        precision,
        recall,
        f_measure,
        auc: auc_rank(&scores, y_true),
        confusion: c,
        roc_points: roc_curve(&scores, y_true),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn preds(scores: &[f64]) -> Vec<Prediction> {
        scores.iter().map(|&s| Prediction::from_positive(s)).collect()
    }

    /// Pairwise count: concordant = 1, tied = 1/2.
    fn auc_pairs(scores: &[f64], labels: &[u8]) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if labels[i] == 1 && labels[j] == 0 {
                    den += 1.0;
                    if scores[i] > scores[j] {
                        num += 1.0;
                    } else if scores[i] == scores[j] {
                        num += 0.5;
                    }
                }
            }
        }
        num / den
    }

    #[test]
    fn perfect_predictions() {
        let r = evaluate(&preds(&[0.1, 0.2, 0.9, 0.8]), &[0, 0, 1, 1]).unwrap();
        assert_eq!((r.accuracy, r.precision, r.recall, r.f_measure, r.auc), (1.0, 1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn flat_scores_give_one_half() {
        let r = evaluate(&preds(&[0.3; 6]), &[0, 1, 0, 1, 1, 0]).unwrap();
        assert_eq!(r.auc, 0.5);
    }

    #[test]
    fn three_of_four_pairs() {
        let scores = [0.1, 0.4, 0.35, 0.8];
        let labels = [0, 0, 1, 1];
        assert_eq!(auc_pairs(&scores, &labels), 0.75);
        assert_eq!(auc_rank(&scores, &labels), 0.75);
    }

    #[test]
    fn zero_denominators() {
        let r = evaluate(&preds(&[0.1, 0.2]), &[0, 1]).unwrap();
        assert_eq!((r.precision, r.recall, r.f_measure), (0.0, 0.0, 0.0));
        assert!(matches!(evaluate(&preds(&[0.1]), &[0, 1]), Err(ModelError::LengthMismatch { .. })));
        assert!(evaluate(&[], &[]).is_err());
    }

    #[test]
    fn confusion_accounting() {
        let r = evaluate(&preds(&[0.9, 0.9, 0.1, 0.1, 0.7]), &[1, 0, 0, 1, 1]).unwrap();
        assert_eq!(r.confusion, Confusion { tp: 2, fp: 1, tn: 1, fn_: 1 });
        assert_eq!(r.accuracy, 3.0 / 5.0);
        assert_eq!(r.f_measure, 2.0 * r.precision * r.recall / (r.precision + r.recall));
    }

    proptest! {
        #[test]
        fn rank_auc_matches_pairs_and_trapezoid(
            data in prop::collection::vec((0u8..20, 0u8..2), 2..80)
        ) {
            let scores: Vec<f64> = data.iter().map(|(s, _)| f64::from(*s) / 20.0).collect();
            let labels: Vec<u8> = data.iter().map(|(_, l)| *l).collect();
            prop_assume!(labels.contains(&0) && labels.contains(&1));
            let rank = auc_rank(&scores, &labels);
            prop_assert!((rank - auc_pairs(&scores, &labels)).abs() < 1e-9);
            let roc = roc_curve(&scores, &labels);
            prop_assert_eq!(roc[0], (0.0, 0.0));
            prop_assert_eq!(*roc.last().unwrap(), (1.0, 1.0));
            prop_assert!(roc.windows(2).all(|w| w[1].0 >= w[0].0 && w[1].1 >= w[0].1));
            prop_assert!((rank - auc_trapezoid(&roc)).abs() < 1e-9);
        }
    }
}
