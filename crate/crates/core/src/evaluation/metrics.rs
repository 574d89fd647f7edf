use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Array;

/// Area under the ROC curve as the Mann-Whitney statistic, with tied scores
/// sharing their average rank. Labels are 0/1.
pub fn auroc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("AUROC scores".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l > 0.5).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::invalid("AUROC is undefined when only one class is present"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal));
    let mut pos_rank_sum = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j share their mean
        let avg = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            if labels[k] > 0.5 {
                pos_rank_sum += avg;
            }
        }
        i = j;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((pos_rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImputationMetrics {
    pub mae: f64,
    pub rmse: f64,
    /// `None` when the true values sum to zero in absolute value.
    pub mre: Option<f64>,
    pub cells: usize,
}

/// Error metrics over the cells flagged in `eval_mask`.
pub fn imputation_metrics(imputed: &Array, ground_truth: &Array, eval_mask: &Array) -> Result<ImputationMetrics> {
    if imputed.shape() != ground_truth.shape() || imputed.shape() != eval_mask.shape() {
        return Err(Error::invalid(format!(
            "imputed {:?}, truth {:?}, eval mask {:?}",
            imputed.shape(),
            ground_truth.shape(),
            eval_mask.shape()
        )));
    }
    let (mut abs, mut sq, mut truth, mut cells) = (0.0f64, 0.0f64, 0.0f64, 0usize);
    for i in 0..imputed.len() {
        if eval_mask[i] > 0.0 {
            let e = imputed[i] as f64 - ground_truth[i] as f64;
            abs += e.abs();
            sq += e * e;
            truth += (ground_truth[i] as f64).abs();
            cells += 1;
        }
    }
    if cells == 0 {
        return Err(Error::invalid("evaluation mask is empty"));
    }
    let c = cells as f64;
    Ok(ImputationMetrics {
        mae: abs / c,
        rmse: (sq / c).sqrt(),
        mre: (truth > 0.0).then(|| abs / truth),
        cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auroc_examples() {
        let s = [0.9, 0.8, 0.2, 0.1];
        assert_eq!(auroc(&s, &[1.0, 1.0, 0.0, 0.0]).unwrap(), 1.0);
        assert_eq!(auroc(&s, &[1.0, 0.0, 1.0, 0.0]).unwrap(), 0.75);
        assert_eq!(auroc(&[0.3; 4], &[1.0, 0.0, 1.0, 0.0]).unwrap(), 0.5);
        assert!(auroc(&s, &[1.0; 4]).is_err());
    }

    #[test]
    fn imputation_examples() {
        let one = |v: f32| Array::scalar(v);
        let m = imputation_metrics(&one(2.0), &one(4.0), &one(1.0)).unwrap();
        assert_eq!((m.mae, m.rmse, m.mre), (2.0, 2.0, Some(0.5)));
        let p = imputation_metrics(&one(4.0), &one(4.0), &one(1.0)).unwrap();
        assert_eq!((p.mae, p.rmse, p.mre), (0.0, 0.0, Some(0.0)));
        let z = imputation_metrics(&one(1.0), &one(0.0), &one(1.0)).unwrap();
        assert_eq!(z.mre, None);
        assert!(imputation_metrics(&one(1.0), &one(0.0), &one(0.0)).is_err());
    }
}
