//! Gated behavior fusion and the cross-behavior contrastive objective.
//!
//! Fusion turns per-behavior tables into one table via a per-node softmax
//! gate. The contrastive loss treats a user's behavior-specific embedding
//! and their fused embedding as a positive pair; every other in-batch user
//! contributes two negatives per anchor — its fused row (cross view) and
//! its behavior-specific row (same view). Similarities are cosine, so the
//! loss is invariant to rescaling any input embedding.

use thiserror::Error;

use crate::tensor::{Graph, NodeId, Tensor};

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("contrastive batch needs at least 2 rows, got {0}")]
    BatchTooSmall(usize),
}

pub struct FuseOut {
    pub fused: NodeId,
    /// N×|B| softmax gate weights (a probability vector per node).
    pub weights: NodeId,
}

/// Softmax-gated combination of per-behavior tables: per node n,
/// logit_b = E_b[n]·w_f, ω = softmax(logits), out[n] = Σ_b ω_b E_b[n].
pub fn gate_fuse(g: &mut Graph, tables: &[NodeId], w_f: NodeId) -> FuseOut {
    assert!(!tables.is_empty(), "gate_fuse over zero behaviors");
    let logit_cols: Vec<NodeId> = tables.iter().map(|&t| g.matmul(t, w_f)).collect();
    let logits = g.concat_cols(&logit_cols);
    let weights = g.softmax_rows(logits);
    let mut acc: Option<NodeId> = None;
    for (b, &t) in tables.iter().enumerate() {
        let col = g.slice_cols(weights, b, 1);
        let weighted = g.col_mul(t, col);
        acc = Some(match acc {
            Some(a) => g.add(a, weighted),
            None => weighted,
        });
    }
    FuseOut { fused: acc.unwrap(), weights }
}

/// Off-diagonal 0/1 mask used to exclude self-pairs from the negative sums.
fn offdiag_mask(k: usize) -> Tensor {
    let mut m = Tensor::new(vec![k, k], vec![1.0; k * k]);
    for i in 0..k {
        m.data_mut()[i * k + i] = 0.0;
    }
    m
}

/// Contrastive alignment of `anchor` rows with the matching `fused` rows
/// (both K×d, row i of each belonging to the same user). Rows are
/// L2-normalized before similarity. Returns the batch-mean loss node.
pub fn infonce(g: &mut Graph, anchor: NodeId, fused: NodeId, tau: f64) -> Result<NodeId, FusionError> {
    let k = g.value(anchor).rows();
    assert_eq!(g.value(anchor).shape(), g.value(fused).shape(), "anchor/fused shape mismatch");
    if k < 2 {
        return Err(FusionError::BatchTooSmall(k));
    }
    let inv_tau = 1.0 / tau;

    let a = g.normalize_rows(anchor);
    let f = g.normalize_rows(fused);

    let pos = g.row_dot(a, f); // K
    let pos_scaled = g.scale(pos, inv_tau);
    let pos_exp = g.exp(pos_scaled);

    let mask = g.constant(offdiag_mask(k));
    let s_cross = g.matmul_nt(a, f); // K×K: anchor_i · fused_j
    let s_same = g.matmul_nt(a, a); // K×K: anchor_i · anchor_j
    let mut neg_terms = Vec::with_capacity(2);
    for s in [s_cross, s_same] {
        let scaled = g.scale(s, inv_tau);
        let e = g.exp(scaled);
        let masked = g.mul(e, mask);
        neg_terms.push(g.row_sum(masked)); // K
    }
    let negs = g.add(neg_terms[0], neg_terms[1]);

    let denom = g.add(pos_exp, negs);
    let log_denom = g.log(denom);
    let per_user = g.sub(log_denom, pos_scaled); // −log(pos/denom)
    Ok(g.mean(per_user))
}

/// Sum of per-(slot, behavior) contrastive terms over the short-horizon
/// views. `batches[t][b]` lists the users participating in that term;
/// batches with fewer than two users contribute nothing (users with no
/// interactions in a slot are excluded upstream).
pub fn short_term_loss(
    g: &mut Graph,
    slot_user: &[Vec<NodeId>],
    short_fused_user: &[NodeId],
    batches: &[Vec<Vec<usize>>],
    tau: f64,
) -> NodeId {
    let mut acc: Option<NodeId> = None;
    for (t, per_b) in slot_user.iter().enumerate() {
        for (b, &table) in per_b.iter().enumerate() {
            let batch = &batches[t][b];
            if batch.len() < 2 {
                continue;
            }
            let anchor = g.gather_rows(table, batch.clone());
            let fused = g.gather_rows(short_fused_user[t], batch.clone());
            let term = infonce(g, anchor, fused, tau).expect("batch length checked");
            acc = Some(match acc {
                Some(a) => g.add(a, term),
                None => term,
            });
        }
    }
    acc.unwrap_or_else(|| g.constant(Tensor::scalar(0.0)))
}

/// Sum over behaviors of the contrastive term between the final refined
/// behavior tables and the fused long-horizon view, on one user batch.
pub fn long_term_loss(
    g: &mut Graph,
    refined: &[NodeId],
    fused: NodeId,
    batch: &[usize],
    tau: f64,
) -> NodeId {
    if batch.len() < 2 {
        return g.constant(Tensor::scalar(0.0));
    }
    let fused_rows = g.gather_rows(fused, batch.to_vec());
    let mut acc: Option<NodeId> = None;
    for &table in refined {
        let anchor = g.gather_rows(table, batch.to_vec());
        let term = infonce(g, anchor, fused_rows, tau).expect("batch length checked");
        acc = Some(match acc {
            Some(a) => g.add(a, term),
            None => term,
        });
    }
    acc.expect("at least one behavior")
}

/// Gradient-magnitude curve for a negative pair at similarity `x`:
/// c(x) = √(1−x²) · exp(x/τ). Larger values mean the pair is pushed apart
/// harder; the curve peaks where x/(1−x²) = 1/τ.
pub fn neg_grad_curve(x: f64, tau: f64) -> f64 {
    assert!((-1.0..=1.0).contains(&x), "similarity {x} outside [-1, 1]");
    assert!(tau > 0.0);
    (1.0 - x * x).sqrt() * (x / tau).exp()
}
