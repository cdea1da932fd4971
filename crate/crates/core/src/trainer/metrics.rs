use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Accuracy,
    RocAuc,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::RocAuc => "roc_auc",
        }
    }
}

/// Scores `logits` rows against `labels`.
///
/// For [`Metric::RocAuc`] the positive-class score is the logit margin of
/// class 1 over class 0, or the single column when `K = 1`.
pub fn evaluate<S: Scalar>(logits: &Tensor<S>, labels: &[usize], metric: Metric) -> Result<f64> {
    if labels.is_empty() || labels.len() != logits.rows() {
        return Err(Error::Precondition(format!(
            "cannot evaluate {} predictions against {} labels",
            logits.rows(),
            labels.len()
        )));
    }
    match metric {
        Metric::Accuracy => {
            let hits = labels
                .iter()
                .enumerate()
                .filter(|&(r, &y)| argmax(logits.row_slice(r)) == y)
                .count();
            Ok(hits as f64 / labels.len() as f64)
        }
        Metric::RocAuc => {
            let scores: Vec<f64> = (0..logits.rows())
                .map(|r| {
                    let row = logits.row_slice(r);
                    match row.len() {
                        1 => row[0].to_f64_lossy(),
                        _ => (row[1] - row[0]).to_f64_lossy(),
                    }
                })
                .collect();
            let positive: Vec<bool> = labels.iter().map(|&y| y == 1).collect();
            roc_auc(&scores, &positive)
        }
    }
}

fn argmax<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0;
    for (k, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = k;
        }
    }
    best
}

/// Mann–Whitney estimate with mid-ranks for ties.
pub fn roc_auc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Precondition("ROC-AUC needs both classes present".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += order[i..=j].iter().filter(|&&k| positive[k]).count() as f64 * mid;
        i = j + 1;
    }
    let np = n_pos as f64;
    Ok((rank_sum - np * (np + 1.0) / 2.0) / (np * n_neg as f64))
}

/// One line of the per-epoch log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub seed: u64,
    pub epoch: usize,
    pub task_loss: f64,
    pub pc_loss: Vec<f64>,
    pub total_loss: f64,
    pub train: f64,
    pub val: f64,
    pub test: f64,
    /// Cross-entropy on the validation set; breaks ties in model selection.
    pub val_loss: f64,
    pub usage_cv: Option<f64>,
    pub prompt_magnitude: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UsageRow {
    pub epoch: usize,
    pub layer: usize,
    pub component: usize,
    pub usage: f64,
}

/// Outcome of one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub metric: Metric,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub final_usage_cv: Option<f64>,
    pub split_warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Population mean and standard deviation.
    pub fn of(xs: &[f64]) -> Self {
        if xs.is_empty() {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
            };
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

/// Coefficient of variation of each layer's usage row, averaged over layers.
pub fn usage_cv(per_layer: &[Vec<f64>]) -> Option<f64> {
    if per_layer.is_empty() {
        return None;
    }
    let cvs: Vec<f64> = per_layer
        .iter()
        .map(|s| {
            let m = MeanStd::of(s);
            if m.mean == 0.0 {
                0.0
            } else {
                m.std / m.mean
            }
        })
        .collect();
    Some(cvs.iter().sum::<f64>() / cvs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_examples() {
        let logits: Tensor<f64> = Tensor::from_rows(&[&[0.1, 0.9], &[2.0, -1.0], &[0.0, 0.0]]);
        assert_eq!(evaluate(&logits, &[1, 0, 0], Metric::Accuracy).unwrap(), 1.0);
        assert!((evaluate(&logits, &[0, 0, 1], Metric::Accuracy).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!(evaluate(&logits, &[], Metric::Accuracy).is_err());
    }

    #[test]
    fn auc_examples() {
        assert_eq!(roc_auc(&[0.9, 0.1], &[true, false]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.5, 0.5], &[true, false]).unwrap(), 0.5);
        assert_eq!(roc_auc(&[0.1, 0.9], &[true, false]).unwrap(), 0.0);
        assert!(roc_auc(&[0.3, 0.4], &[true, true]).is_err());
        let logits: Tensor<f64> = Tensor::from_rows(&[&[0.0, 0.9], &[0.0, 0.1]]);
        assert_eq!(evaluate(&logits, &[1, 0], Metric::RocAuc).unwrap(), 1.0);
    }

    #[test]
    fn auc_matches_pair_counting() {
        let scores = [0.3, 0.7, 0.7, 0.1, 0.5, 0.3, 0.9, 0.5];
        let pos = [true, false, true, false, true, true, false, false];
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for i in 0..8 {
            for j in 0..8 {
                if pos[i] && !pos[j] {
                    pairs += 1.0;
                    wins += if scores[i] > scores[j] {
                        1.0
                    } else if scores[i] == scores[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        assert!((roc_auc(&scores, &pos).unwrap() - wins / pairs).abs() < 1e-15);
    }

    #[test]
    fn summary_statistics() {
        let m = MeanStd::of(&[1.0, 3.0]);
        assert_eq!((m.mean, m.std), (2.0, 1.0));
        assert_eq!(usage_cv(&[vec![2.0, 2.0], vec![3.0, 1.0]]), Some(0.25));
        assert_eq!(usage_cv(&[]), None);
    }
}
