use serde::{Deserialize, Serialize};

use crate::bias::BiasKind;
use crate::error::{KtError, Result};

fn check_inputs(preds: &[f64], labels: &[bool]) -> Result<()> {
    if preds.len() != labels.len() {
        return Err(KtError::shape("metrics", &[preds.len()], &[labels.len()]));
    }
    if preds.is_empty() {
        return Err(KtError::Empty("metrics input"));
    }
    Ok(())
}

/// Area under the ROC curve via the rank-sum statistic, ties sharing their
/// average rank (so a tied positive/negative pair counts one half).
pub fn auc(preds: &[f64], labels: &[bool]) -> Result<f64> {
    check_inputs(preds, labels)?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(KtError::SingleClass);
    }
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[a].total_cmp(&preds[b]));
    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && preds[order[j]] == preds[order[i]] {
            j += 1;
        }
        // ranks i+1..=j share their mean
        let avg = (i + 1 + j) as f64 / 2.0;
        pos_rank_sum += avg * order[i..j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((pos_rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PointMetrics {
    pub acc: f64,
    pub rmse: f64,
    pub w_acc: f64,
}

/// Accuracy at `threshold` (a prediction `≥ threshold` means correct), root
/// mean squared error, and balanced accuracy `½(TPR + TNR)`.
pub fn acc_rmse_wacc(preds: &[f64], labels: &[bool], threshold: f64) -> Result<PointMetrics> {
    check_inputs(preds, labels)?;
    let (mut tp, mut fnn, mut tn, mut fp) = (0usize, 0usize, 0usize, 0usize);
    let mut sq = 0.0;
    for (&p, &l) in preds.iter().zip(labels) {
        let hit = p >= threshold;
        match (hit, l) {
            (true, true) => tp += 1,
            (false, true) => fnn += 1,
            (false, false) => tn += 1,
            (true, false) => fp += 1,
        }
        let y = if l { 1.0 } else { 0.0 };
        sq += (p - y) * (p - y);
    }
    if tp + fnn == 0 || tn + fp == 0 {
        return Err(KtError::SingleClass);
    }
    let n = preds.len() as f64;
    Ok(PointMetrics {
        acc: (tp + tn) as f64 / n,
        rmse: (sq / n).sqrt(),
        w_acc: weighted_accuracy(tp, fnn, tn, fp),
    })
}

/// `½(TP/(TP+FN) + TN/(TN+FP))`.
pub fn weighted_accuracy(tp: usize, fnn: usize, tn: usize, fp: usize) -> f64 {
    0.5 * (tp as f64 / (tp + fnn) as f64 + tn as f64 / (tn + fp) as f64)
}

/// Test-set metrics. `rmse` is stored raw; tables conventionally show it ×100.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub auc: f64,
    pub acc: f64,
    pub rmse: f64,
    pub w_acc: f64,
    pub n_evaluated: usize,
    pub fold: Option<usize>,
    pub seed: Option<u64>,
    pub bias_kind: BiasKind,
    pub length: Option<usize>,
}

impl MetricsReport {
    pub fn from_predictions(preds: &[f64], labels: &[bool], bias_kind: BiasKind) -> Result<Self> {
        let auc = auc(preds, labels)?;
        let pm = acc_rmse_wacc(preds, labels, 0.5)?;
        Ok(MetricsReport {
            auc,
            acc: pm.acc,
            rmse: pm.rmse,
            w_acc: pm.w_acc,
            n_evaluated: preds.len(),
            fold: None,
            seed: None,
            bias_kind,
            length: None,
        })
    }

    pub fn rmse_x100(&self) -> f64 {
        self.rmse * 100.0
    }

    /// `(name, value)` pairs in a fixed order, for flat tables.
    pub fn metric_values(&self) -> [(&'static str, f64); 4] {
        [
            ("auc", self.auc),
            ("acc", self.acc),
            ("rmse", self.rmse),
            ("w_acc", self.w_acc),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.9, 0.1], &[true, false]).unwrap(), 1.0);
        assert_eq!(auc(&[0.2, 0.8, 0.6], &[true, false, true]).unwrap(), 0.0);
        assert_eq!(auc(&[0.5, 0.5], &[true, false]).unwrap(), 0.5);
        assert!(matches!(auc(&[0.1, 0.2], &[true, true]), Err(KtError::SingleClass)));
        assert!(auc(&[], &[]).is_err());
    }

    #[test]
    fn point_examples() {
        let m = acc_rmse_wacc(&[0.9, 0.1], &[true, false], 0.5).unwrap();
        assert_eq!(m.acc, 1.0);
        assert!((m.rmse - 0.1).abs() < 1e-12);
        assert_eq!(m.w_acc, 1.0);
        let c = acc_rmse_wacc(&[0.5 + 1e-9; 4], &[true, true, false, false], 0.5).unwrap();
        assert_eq!((c.acc, c.w_acc), (0.5, 0.5));
        assert_eq!(weighted_accuracy(3, 1, 2, 2), 0.625);
        let half = acc_rmse_wacc(&[0.5; 4], &[true, false, true, false], 0.5).unwrap();
        assert_eq!(half.rmse, 0.5);
        let perfect = acc_rmse_wacc(&[1.0 - 1e-7, 1e-7], &[true, false], 0.5).unwrap();
        assert!(perfect.rmse <= 1e-7);
    }
}
