//! Multi-head target attention (MHTA) and the category-filtered search over
//! long behavior sequences.
//!
//! MHTA attends a single query item over a behavior sequence. Per head `i`
//! with projections `W_i^Q, W_i^K, W_i^V` (each `d/h x d`):
//!
//! ```text
//! logits_j = (W_i^Q q) . (W_i^K e_j) / sqrt(d/h)    over unmasked j
//! head_i   = sum_j softmax(logits)_j * (W_i^V e_j)
//! out      = concat(head_1 .. head_h)               (d wide)
//! ```
//!
//! The scaling sits inside the softmax (standard scaled dot-product). A
//! fully masked or empty sequence yields a zero vector, never NaN.
//!
//! Both an eager route (inference) and a tape route (training) are provided;
//! they share kernel loop orders and agree bitwise on the same inputs.

use crate::data::ItemFeatures;
use crate::graph::{Graph, NodeId, Value};
use crate::kernels;

/// Indices of long-sequence items whose category matches the anchor's,
/// original order preserved (the SIM-style hard search).
pub fn sim_category_search(long_sequence: &[ItemFeatures], anchor: &ItemFeatures) -> Vec<usize> {
    long_sequence
        .iter()
        .enumerate()
        .filter(|(_, item)| item.category_id == anchor.category_id)
        .map(|(i, _)| i)
        .collect()
}

/// One attention head's projections, each `d/h x d` row-major.
#[derive(Clone, Copy)]
pub struct HeadWeights<'a> {
    pub wq: &'a [f64],
    pub wk: &'a [f64],
    pub wv: &'a [f64],
}

/// Eager MHTA over `d`-wide item vectors. `items[j]` participates iff
/// `mask[j]`; with no unmasked items the output is the zero vector.
pub fn mhta_eager(
    query: &[f64],
    items: &[&[f64]],
    mask: &[bool],
    heads: &[HeadWeights<'_>],
    head_dim: usize,
) -> Vec<f64> {
    let d = query.len();
    debug_assert_eq!(items.len(), mask.len());
    debug_assert_eq!(heads.len() * head_dim, d);
    let live: Vec<&[f64]> = items
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(e, _)| *e)
        .collect();
    if live.is_empty() {
        return vec![0.0; d];
    }
    let mut out = Vec::with_capacity(d);
    let scale = 1.0 / (head_dim as f64).sqrt();
    for head in heads {
        let q = kernels::matvec(head.wq, head_dim, d, query);
        let mut logits: Vec<f64> = live
            .iter()
            .map(|e| kernels::dot(&q, &kernels::matvec(head.wk, head_dim, d, e)) * scale)
            .collect();
        kernels::softmax_inplace(&mut logits);
        let mut acc = vec![0.0; head_dim];
        for (w, e) in logits.iter().zip(&live) {
            let v = kernels::matvec(head.wv, head_dim, d, e);
            for i in 0..head_dim {
                acc[i] += w * v[i];
            }
        }
        out.extend_from_slice(&acc);
    }
    out
}

/// One head's projection nodes on a tape.
#[derive(Clone, Copy)]
pub struct HeadNodes {
    pub wq: NodeId,
    pub wk: NodeId,
    pub wv: NodeId,
}

/// Tape MHTA. `items` holds only the unmasked item nodes (masking happens
/// when the per-sample tape is built, so padding can never influence the
/// output). Empty `items` contributes a zero constant.
pub fn mhta_node(
    g: &mut Graph,
    query: NodeId,
    items: &[NodeId],
    heads: &[HeadNodes],
    head_dim: usize,
) -> NodeId {
    let d = heads.len() * head_dim;
    if items.is_empty() {
        return g.constant(Value::zeros(d, 1));
    }
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut head_outputs = Vec::with_capacity(heads.len());
    for head in heads {
        let q = g.matmul(head.wq, query);
        let logits: Vec<NodeId> = items
            .iter()
            .map(|&e| {
                let k = g.matmul(head.wk, e);
                let raw = g.dot(q, k);
                g.scale(raw, scale)
            })
            .collect();
        let logits_vec = g.concat(&logits);
        let weights = g.softmax(logits_vec);
        let mut acc: Option<NodeId> = None;
        for (j, &e) in items.iter().enumerate() {
            let w_j = g.slice(weights, j, 1);
            let v = g.matmul(head.wv, e);
            let term = g.mul(w_j, v);
            acc = Some(match acc {
                Some(a) => g.add(a, term),
                None => term,
            });
        }
        head_outputs.push(acc.unwrap());
    }
    if head_outputs.len() == 1 {
        head_outputs[0]
    } else {
        g.concat(&head_outputs)
    }
}
