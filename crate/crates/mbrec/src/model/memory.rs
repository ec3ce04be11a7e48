//! Cross-behavior attention memory between adjacent slots.
//!
//! For each node (user or item) independently: the current slot's
//! behavior-specific embeddings act as queries, the previous slot's as keys
//! and values (values unprojected). Per query behavior the |B| key-behavior
//! logits are softmax-normalized and the previous-slot rows combined, so a
//! behavior at time t attends over all behaviors at time t−1. Refinement
//! then averages the attended summary back into the current tables.

use crate::tensor::{Graph, NodeId, Tensor};

/// Stacked per-behavior tables (the value-level three-way tensor |B|×N×d).
/// Inside a graph the stack stays a list of table nodes; this type carries
/// plain values for oracles, dumps, and round-trip checks.
#[derive(Debug, Clone, PartialEq)]
pub struct BehaviorTensor {
    tables: Vec<Tensor>,
}

impl BehaviorTensor {
    /// Stack per-behavior tables in catalog order. All tables must share
    /// one N×d shape.
    pub fn stack(tables: Vec<Tensor>) -> Self {
        assert!(!tables.is_empty(), "stacking zero tables");
        let shape = tables[0].shape().to_vec();
        assert_eq!(shape.len(), 2, "behavior tables must be matrices");
        for t in &tables {
            assert_eq!(t.shape(), &shape[..], "behavior table shape mismatch");
        }
        BehaviorTensor { tables }
    }

    pub fn num_behaviors(&self) -> usize {
        self.tables.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.tables[0].rows()
    }

    pub fn dim(&self) -> usize {
        self.tables[0].cols()
    }

    pub fn table(&self, b: usize) -> &Tensor {
        &self.tables[b]
    }

    pub fn tables(&self) -> &[Tensor] {
        &self.tables
    }
}

pub struct CrossAttentionOut {
    /// Attended summaries, one table per query behavior.
    pub z: Vec<NodeId>,
    /// Softmax weight tables `[query b][head]`, each N×|B|; row n holds the
    /// attention of (b, node n) over the previous slot's behaviors.
    pub weights: Vec<Vec<NodeId>>,
}

/// Scaled dot-product attention across behaviors for every node at once.
/// `e_t` and `e_prev` are per-behavior N×d tables; `heads` must divide d.
pub fn cross_attention(
    g: &mut Graph,
    e_t: &[NodeId],
    e_prev: &[NodeId],
    w_q: NodeId,
    w_k: NodeId,
    heads: usize,
) -> CrossAttentionOut {
    let nb = e_t.len();
    assert_eq!(nb, e_prev.len(), "behavior count mismatch between slots");
    let d = g.value(e_t[0]).cols();
    assert!(heads >= 1 && d.is_multiple_of(heads), "heads {heads} must divide d {d}");
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let queries: Vec<NodeId> = e_t.iter().map(|&e| g.matmul(e, w_q)).collect();
    let keys: Vec<NodeId> = e_prev.iter().map(|&e| g.matmul(e, w_k)).collect();

    let mut z = Vec::with_capacity(nb);
    let mut weights = Vec::with_capacity(nb);
    for &query in &queries {
        let mut head_outs = Vec::with_capacity(heads);
        let mut head_weights = Vec::with_capacity(heads);
        for h in 0..heads {
            let q_h = if heads == 1 { query } else { g.slice_cols(query, h * dh, dh) };
            let mut logit_cols = Vec::with_capacity(nb);
            for &key in keys.iter() {
                let k_h = if heads == 1 { key } else { g.slice_cols(key, h * dh, dh) };
                let raw = g.row_dot(q_h, k_h);
                logit_cols.push(g.scale(raw, scale));
            }
            let logits = g.concat_cols(&logit_cols); // N×|B|
            let attn = g.softmax_rows(logits);
            head_weights.push(attn);

            let mut acc: Option<NodeId> = None;
            for (bp, &prev) in e_prev.iter().enumerate() {
                let v_h = if heads == 1 { prev } else { g.slice_cols(prev, h * dh, dh) };
                let col = g.slice_cols(attn, bp, 1);
                let weighted = g.col_mul(v_h, col);
                acc = Some(match acc {
                    Some(a) => g.add(a, weighted),
                    None => weighted,
                });
            }
            head_outs.push(acc.expect("at least one behavior"));
        }
        let zb = if heads == 1 { head_outs[0] } else { g.concat_cols(&head_outs) };
        z.push(zb);
        weights.push(head_weights);
    }
    CrossAttentionOut { z, weights }
}

/// Elementwise mean of the current tables and the attended summaries.
pub fn refine(g: &mut Graph, e_t: &[NodeId], z: &[NodeId]) -> Vec<NodeId> {
    assert_eq!(e_t.len(), z.len());
    e_t.iter()
        .zip(z)
        .map(|(&e, &zb)| {
            let s = g.add(e, zb);
            g.scale(s, 0.5)
        })
        .collect()
}

/// Flatten attention weight tables into CSV for inspection: one line per
/// (node, head, query behavior, key behavior). `maps[b][head]` are N×|B|
/// weight tables as produced by [`cross_attention`].
pub fn attention_maps_csv(maps: &[Vec<Tensor>], node_label: &str) -> String {
    let mut out = format!("{node_label},head,query_behavior,key_behavior,weight\n");
    for (qb, heads) in maps.iter().enumerate() {
        for (h, table) in heads.iter().enumerate() {
            for node in 0..table.rows() {
                for kb in 0..table.cols() {
                    out.push_str(&format!("{node},{h},{qb},{kb},{:.6}\n", table.get2(node, kb)));
                }
            }
        }
    }
    out
}

pub struct MemoryChainOut {
    /// Refined tables per transition target slot (slots 1..Λ−1, in order).
    pub refined: Vec<Vec<NodeId>>,
    /// The final slot's tables: refined when a transition exists, raw
    /// otherwise (single-slot degenerate mode).
    pub final_tables: Vec<NodeId>,
    /// Attention weights of the last transition, `[b][head]`, if any.
    pub last_attention: Option<Vec<Vec<NodeId>>>,
}

/// Chain attention along consecutive slots. Attention always consumes the
/// raw stacked tables of both slots — refinement never feeds back into the
/// next transition's inputs.
pub fn run_memory_chain(
    g: &mut Graph,
    slots: &[Vec<NodeId>],
    w_q: NodeId,
    w_k: NodeId,
    heads: usize,
) -> MemoryChainOut {
    assert!(!slots.is_empty(), "no slots to chain");
    if slots.len() == 1 {
        return MemoryChainOut { refined: Vec::new(), final_tables: slots[0].clone(), last_attention: None };
    }
    let mut refined = Vec::with_capacity(slots.len() - 1);
    let mut last_attention = None;
    for t in 1..slots.len() {
        let att = cross_attention(g, &slots[t], &slots[t - 1], w_q, w_k, heads);
        refined.push(refine(g, &slots[t], &att.z));
        last_attention = Some(att.weights);
    }
    let final_tables = refined.last().expect("at least one transition").clone();
    MemoryChainOut { refined, final_tables, last_attention }
}
