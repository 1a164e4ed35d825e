//! Collaborative contrastive learning: context-set division, importance
//! sampling weights, the repulsion and attraction losses, and the
//! pair-label prior that scales the attraction term.
//!
//! The collaborative degree `s` of an item is a scalar produced by the
//! collaborative module (see `model`); its raw MLP output `r` is squashed to
//! `s = xi * ln(pi * sigmoid(r))`, which pins `e^{s/xi} = pi * sigmoid(r)`
//! inside `(0, pi)` — the band on which the cosine in the attraction loss is
//! monotone and its log argument stays positive.
//!
//! Within one sample, context items sharing the target's click label form
//! the positive set, the rest the negative set. With importance weights
//! `w_j = e^{-s_j/c} / sum_k e^{-s_k/c}`:
//!
//! - repulsion: `-log( e^{s/tau} / (e^{s/tau} + M * sum_j w_j e^{s'_j/tau}) )`
//!   (an InfoNCE variant; `M` is the negative-set size),
//! - attraction: `-log( cos(a - b)/2 + 1/2 )` with `a = e^{s/xi}` and
//!   `b = sum_j w_j e^{s'_j/xi}`.
//!
//! An empty positive or negative set contributes exactly 0.
//!
//! Each operation has an eager form (unit-testable scalar math, also used by
//! the browser demo) and a tape form used in training; the two agree to
//! floating-point roundoff and the tape form's gradients are checked against
//! finite differences.

use std::fmt;

use crate::data::{ImpressionPage, TrainingSample};
use crate::graph::{Graph, NodeId};
use crate::kernels;

/// All scalar knobs of the method in one place.
#[derive(Clone, Debug, PartialEq)]
pub struct HyperParams {
    /// Repulsion temperature.
    pub tau: f64,
    /// Attraction scaling coefficient.
    pub xi: f64,
    /// Weight of the contrastive terms in the total loss.
    pub lambda: f64,
    /// Embedding dimension d.
    pub dim: usize,
    /// Attention heads h (must divide d).
    pub heads: usize,
    /// Initial AdaGrad learning rate.
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Short behavior sequence cap.
    pub l_short: usize,
    /// Long behavior sequence cap.
    pub l_long: usize,
}

impl Default for HyperParams {
    /// Desk-scale defaults; tau/xi follow the reference setting (0.5, 0.8).
    fn default() -> HyperParams {
        HyperParams {
            tau: 0.5,
            xi: 0.8,
            lambda: 0.1,
            dim: 16,
            heads: 4,
            learning_rate: 0.001,
            batch_size: 64,
            l_short: 20,
            l_long: 100,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<(), String> {
        if self.tau <= 0.0 {
            return Err(format!("tau must be positive, got {}", self.tau));
        }
        if self.xi <= 0.0 {
            return Err(format!("xi must be positive, got {}", self.xi));
        }
        if self.lambda < 0.0 {
            return Err(format!("lambda must be nonnegative, got {}", self.lambda));
        }
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(format!(
                "heads ({}) must divide dim ({})",
                self.heads, self.dim
            ));
        }
        if self.learning_rate <= 0.0 {
            return Err("learning rate must be positive".to_string());
        }
        if self.batch_size == 0 {
            return Err("batch size must be at least 1".to_string());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ContrastiveError {
    EmptyDegreeList,
    NonPositiveCoefficient(f64),
    /// The pair prior needs more than one exposure per page on average.
    PriorUndefined { n0: f64, n1: f64 },
}

impl fmt::Display for ContrastiveError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ContrastiveError::EmptyDegreeList => {
                write!(f, "importance weights need a nonempty degree list")
            }
            ContrastiveError::NonPositiveCoefficient(c) => {
                write!(f, "coefficient must be positive, got {c}")
            }
            ContrastiveError::PriorUndefined { n0, n1 } => write!(
                f,
                "pair prior undefined: N0 + N1 = {} must exceed 1",
                n0 + n1
            ),
        }
    }
}

impl std::error::Error for ContrastiveError {}

// ── context split ────────────────────────────────────────────────────

/// Context indices divided by label agreement with the target.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContextSplit {
    /// Context positions whose click label equals the target's.
    pub positive: Vec<usize>,
    /// Context positions with the differing label.
    pub negative: Vec<usize>,
}

impl ContextSplit {
    pub fn m_plus(&self) -> usize {
        self.positive.len()
    }

    pub fn m_minus(&self) -> usize {
        self.negative.len()
    }
}

/// Divide a sample's context items: co-click / co-non-click pairs are
/// positive (collaborative), mono-click pairs negative.
pub fn split_context_sets(sample: &TrainingSample) -> ContextSplit {
    let target_label = sample.target_label();
    let mut positive = Vec::new();
    let mut negative = Vec::new();
    for (i, (_, label)) in sample.context().enumerate() {
        if *label == target_label {
            positive.push(i);
        } else {
            negative.push(i);
        }
    }
    ContextSplit { positive, negative }
}

// ── squashing map ────────────────────────────────────────────────────

/// Squash a raw collaborative-module output so `e^{s/xi}` lands in
/// `(0, pi)`: `s = xi * ln(pi * sigmoid(raw))`.
pub fn squash_degree(raw: f64, xi: f64) -> f64 {
    xi * (std::f64::consts::PI * kernels::sigmoid(raw)).ln()
}

/// Tape form of [`squash_degree`].
pub fn squash_degree_node(g: &mut Graph, raw: NodeId, xi: f64) -> NodeId {
    let sig = g.sigmoid(raw);
    let scaled = g.scale(sig, std::f64::consts::PI);
    let ln = g.log(scaled);
    g.scale(ln, xi)
}

// ── importance sampling weights ──────────────────────────────────────

/// `w_j = e^{-s_j/c} / sum_k e^{-s_k/c}`, max-subtracted.
pub fn importance_weights(degrees: &[f64], coefficient: f64) -> Result<Vec<f64>, ContrastiveError> {
    if degrees.is_empty() {
        return Err(ContrastiveError::EmptyDegreeList);
    }
    if coefficient <= 0.0 {
        return Err(ContrastiveError::NonPositiveCoefficient(coefficient));
    }
    let inv = -1.0 / coefficient;
    let mut w: Vec<f64> = degrees.iter().map(|s| inv * s).collect();
    kernels::softmax_inplace(&mut w);
    Ok(w)
}

/// Tape form: softmax of the negated, scaled degree vector.
pub fn importance_weights_node(g: &mut Graph, degrees: NodeId, coefficient: f64) -> NodeId {
    assert!(coefficient > 0.0, "coefficient must be positive");
    let scaled = g.scale(degrees, -1.0 / coefficient);
    g.softmax(scaled)
}

// ── repulsion loss ───────────────────────────────────────────────────

/// InfoNCE-style repulsion against the negative set; 0 on an empty set.
pub fn repulsion_loss(s_target: f64, negative_degrees: &[f64], tau: f64) -> f64 {
    if negative_degrees.is_empty() {
        return 0.0;
    }
    let w = importance_weights(negative_degrees, tau).unwrap();
    let inv_tau = 1.0 / tau;
    let mut weighted = 0.0;
    for (wj, s) in w.iter().zip(negative_degrees) {
        weighted += wj * (inv_tau * s).exp();
    }
    let m = negative_degrees.len() as f64;
    let denom = (inv_tau * s_target).exp() + m * weighted;
    denom.ln() + (-inv_tau) * s_target
}

/// Tape form of [`repulsion_loss`]; callers branch on the empty set.
pub fn repulsion_node(g: &mut Graph, s_target: NodeId, negatives: NodeId, tau: f64) -> NodeId {
    let m = g.shape(negatives).0 as f64;
    let w = importance_weights_node(g, negatives, tau);
    let scaled = g.scale(negatives, 1.0 / tau);
    let e = g.exp(scaled);
    let weighted = g.mul(w, e);
    let wsum = g.sum(weighted);
    let s_scaled = g.scale(s_target, 1.0 / tau);
    let es = g.exp(s_scaled);
    let m_wsum = g.scale(wsum, m);
    let denom = g.add(es, m_wsum);
    let log_denom = g.log(denom);
    let neg_s = g.scale(s_target, -1.0 / tau);
    g.add(log_denom, neg_s)
}

// ── attraction loss ──────────────────────────────────────────────────

/// Cosine-of-difference attraction toward the positive set; 0 on an empty
/// set. Requires degrees produced by the squashing map so that both
/// `e^{s/xi}` terms lie in `(0, pi)`.
pub fn attraction_loss(s_target: f64, positive_degrees: &[f64], xi: f64) -> f64 {
    if positive_degrees.is_empty() {
        return 0.0;
    }
    let w = importance_weights(positive_degrees, xi).unwrap();
    let inv_xi = 1.0 / xi;
    let a = (inv_xi * s_target).exp();
    let mut b = 0.0;
    for (wj, s) in w.iter().zip(positive_degrees) {
        b += wj * (inv_xi * s).exp();
    }
    -(0.5 * (a - b).cos() + 0.5).ln()
}

/// Tape form of [`attraction_loss`]; callers branch on the empty set.
pub fn attraction_node(g: &mut Graph, s_target: NodeId, positives: NodeId, xi: f64) -> NodeId {
    let w = importance_weights_node(g, positives, xi);
    let scaled = g.scale(positives, 1.0 / xi);
    let e = g.exp(scaled);
    let weighted = g.mul(w, e);
    let b = g.sum(weighted);
    let s_scaled = g.scale(s_target, 1.0 / xi);
    let a = g.exp(s_scaled);
    let cos = g.cos_diff(a, b);
    let half_cos = g.scale(cos, 0.5);
    let half = g.constant_scalar(0.5);
    let arg = g.add(half_cos, half);
    let ln = g.log(arg);
    g.scale(ln, -1.0)
}

// ── pair-label prior ─────────────────────────────────────────────────

/// Lower clamp applied to `P+` before the `P-/P+` division.
pub const P_PLUS_CLAMP: f64 = 1e-3;

/// Probability that a random same-page pair shares its click label,
/// estimated from the average clicked (`N1`) and unclicked (`N0`) exposure
/// counts per page; used to down-weight the attraction loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairPrior {
    pub n0: f64,
    pub n1: f64,
    pub p_plus: f64,
    pub p_minus: f64,
    /// `P- / max(P+, P_PLUS_CLAMP)`.
    pub attraction_weight: f64,
}

impl PairPrior {
    pub fn from_counts(n0: f64, n1: f64) -> Result<PairPrior, ContrastiveError> {
        if !(n0 >= 0.0 && n1 >= 0.0) || n0 + n1 <= 1.0 {
            return Err(ContrastiveError::PriorUndefined { n0, n1 });
        }
        let total = n0 + n1;
        let raw = (n0 * (n0 - 1.0) + n1 * (n1 - 1.0)) / (total * (total - 1.0));
        // Fractional averages below 1 can push the combinatorial formula
        // slightly outside [0, 1]; clamp to keep it a probability.
        let p_plus = raw.clamp(0.0, 1.0);
        let p_minus = 1.0 - p_plus;
        Ok(PairPrior {
            n0,
            n1,
            p_plus,
            p_minus,
            attraction_weight: p_minus / p_plus.max(P_PLUS_CLAMP),
        })
    }

    /// Dataset-wide averages over the training split.
    pub fn from_pages(pages: &[ImpressionPage]) -> Result<PairPrior, ContrastiveError> {
        if pages.is_empty() {
            return Err(ContrastiveError::PriorUndefined { n0: 0.0, n1: 0.0 });
        }
        let mut clicked = 0.0f64;
        let mut unclicked = 0.0f64;
        for page in pages {
            let c = page.clicked_count() as f64;
            clicked += c;
            unclicked += page.exposures.len() as f64 - c;
        }
        let pages_f = pages.len() as f64;
        PairPrior::from_counts(unclicked / pages_f, clicked / pages_f)
    }
}

/// Total loss composition: `L = L_CE + lambda * (L_rep + (P-/P+) * L_att)`.
pub fn total_loss_value(ce: f64, repulsion: f64, attraction: f64, lambda: f64, prior: &PairPrior) -> f64 {
    ce + lambda * (repulsion + prior.attraction_weight * attraction)
}
