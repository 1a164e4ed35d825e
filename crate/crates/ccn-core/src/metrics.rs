//! Ranking metrics. AUC is the probability that a random positive outscores
//! a random negative, ties counted half.

use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum MetricsError {
    LengthMismatch { scores: usize, labels: usize },
    /// AUC is undefined without both a positive and a negative example.
    SingleClass,
    InvalidLabel { index: usize, label: u8 },
    NonFiniteScore { index: usize },
}

impl fmt::Display for MetricsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricsError::LengthMismatch { scores, labels } => {
                write!(f, "auc: {scores} scores vs {labels} labels")
            }
            MetricsError::SingleClass => {
                write!(f, "auc: undefined, labels contain a single class")
            }
            MetricsError::InvalidLabel { index, label } => {
                write!(f, "auc: label {label} at index {index} is not 0/1")
            }
            MetricsError::NonFiniteScore { index } => {
                write!(f, "auc: non-finite score at index {index}")
            }
        }
    }
}

impl std::error::Error for MetricsError {}

/// Rank-based AUC in O(n log n), exactly equal to the pairwise definition
/// `mean over (pos, neg) pairs of [score_pos > score_neg] + 1/2 [equal]`.
///
/// Ties receive average ranks, so tied positive/negative pairs contribute
/// exactly one half; both formulations accumulate multiples of 0.5, which
/// f64 represents exactly at any realistic n.
pub fn compute_auc(scores: &[f64], labels: &[u8]) -> Result<f64, MetricsError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    let mut positives = 0usize;
    for (i, &label) in labels.iter().enumerate() {
        if label > 1 {
            return Err(MetricsError::InvalidLabel { index: i, label });
        }
        if !scores[i].is_finite() {
            return Err(MetricsError::NonFiniteScore { index: i });
        }
        positives += label as usize;
    }
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(MetricsError::SingleClass);
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Average ranks over tie groups (1-based), summed over positives.
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }

    let p = positives as f64;
    let n = negatives as f64;
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}
