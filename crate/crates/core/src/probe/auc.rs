//! ROC AUC through the Mann-Whitney rank statistic.

use serde::{Deserialize, Serialize};

/// AUC of `scores` against binary `positive` labels, with tied scores
/// sharing their average rank (a tied positive/negative pair counts one
/// half). `None` when either class is absent.
pub fn roc_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), positive.len(), "scores and labels differ in length");
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Ranks are 1-based; a tie group spanning positions i..j gets (i+1+j)/2.
    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        let pos_in_group = order[i..j].iter().filter(|&&k| positive[k]).count();
        pos_rank_sum += avg_rank * pos_in_group as f64;
        i = j;
    }

    let (p, n) = (n_pos as f64, n_neg as f64);
    let u = pos_rank_sum - p * (p + 1.0) / 2.0;
    Some(u / (p * n))
}

/// Per-class and macro-averaged AUC for one evaluation split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AucReport {
    /// Unweighted mean over the scored classes.
    pub overall_auc: f64,
    /// `None` for classes lacking positives or negatives in the split.
    pub per_class_auc: Vec<Option<f64>>,
    pub excluded_classes: Vec<usize>,
    pub aggregation: String,
}

impl AucReport {
    pub(crate) fn from_per_class(per_class_auc: Vec<Option<f64>>) -> Option<Self> {
        let scored: Vec<f64> = per_class_auc.iter().flatten().copied().collect();
        if scored.is_empty() {
            return None;
        }
        let excluded_classes = per_class_auc
            .iter()
            .enumerate()
            .filter(|(_, a)| a.is_none())
            .map(|(c, _)| c)
            .collect();
        Some(AucReport {
            overall_auc: scored.iter().sum::<f64>() / scored.len() as f64,
            per_class_auc,
            excluded_classes,
            aggregation: "macro".into(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_and_inverted() {
        let labels = [false, false, true, true];
        assert_eq!(roc_auc(&[0.0, 0.0, 1.0, 1.0], &labels), Some(1.0));
        assert_eq!(roc_auc(&[0.9, 0.8, 0.1, 0.2], &labels), Some(0.0));
    }

    #[test]
    fn all_tied_is_half() {
        assert_eq!(roc_auc(&[0.3; 7], &[true, false, true, false, false, true, false]), Some(0.5));
    }

    #[test]
    fn known_value() {
        // positives {3, 5}, negatives {1, 2, 4}: 5 of 6 pairs ordered correctly
        let auc = roc_auc(&[3.0, 5.0, 1.0, 2.0, 4.0], &[true, true, false, false, false]).unwrap();
        assert!((auc - 5.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn single_class_is_none() {
        assert_eq!(roc_auc(&[0.1, 0.2], &[true, true]), None);
        assert_eq!(roc_auc(&[0.1, 0.2], &[false, false]), None);
    }

    #[test]
    fn report_excludes_unscored() {
        let r = AucReport::from_per_class(vec![Some(0.5), None, Some(1.0)]).unwrap();
        assert_eq!(r.overall_auc, 0.75);
        assert_eq!(r.excluded_classes, vec![1]);
        assert!(AucReport::from_per_class(vec![None, None]).is_none());
    }
}
