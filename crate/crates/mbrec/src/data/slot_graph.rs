//! Per-(slot, behavior) sparse interaction graphs with degree-normalized
//! adjacencies.
//!
//! With M the item×user 0/1 incidence matrix, D the diagonal of item
//! degrees and B the diagonal of user degrees:
//!
//! * item-item propagation uses  Γ_ii = D^{-1/2} · M · B^{-1} · Mᵀ · D^{-1/2}
//! * user aggregation uses       Γ_ui = B^{-1/2} · Mᵀ · D^{-1/2}
//!
//! Zero degrees normalize as 0^{-1/2} := 0, so isolated nodes produce
//! all-zero rows rather than NaN.

use std::sync::Arc;

use crate::tensor::SparseMatrix;

use super::slots::SlotEdge;

#[derive(Debug, Clone)]
pub struct SlotGraph {
    pub t: usize,
    pub b: usize,
    pub num_users: usize,
    pub num_items: usize,
    /// Deduplicated edges sorted by (user, item), each with its earliest
    /// offset from the slot start.
    pub edges: Vec<SlotEdge>,
    /// Item×user 0/1 incidence.
    pub m: SparseMatrix,
    /// Nonzeros per item row of M.
    pub item_deg: Vec<f64>,
    /// Nonzeros per user column of M.
    pub user_deg: Vec<f64>,
    /// Symmetric normalized item-item adjacency.
    pub gamma_ii: Arc<SparseMatrix>,
    /// Normalized user×item aggregation matrix.
    pub gamma_ui: Arc<SparseMatrix>,
}

impl SlotGraph {
    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    /// Users with at least one edge in this slot-behavior graph.
    pub fn active_users(&self) -> impl Iterator<Item = usize> + '_ {
        let deg = &self.user_deg;
        (0..self.num_users).filter(move |&u| deg[u] > 0.0)
    }
}

fn inv_sqrt_or_zero(d: f64) -> f64 {
    if d > 0.0 {
        1.0 / d.sqrt()
    } else {
        0.0
    }
}

pub fn build_slot_graph(
    t: usize,
    b: usize,
    edges: &[SlotEdge],
    num_users: usize,
    num_items: usize,
) -> SlotGraph {
    let mut edges = edges.to_vec();
    edges.sort_by_key(|e| (e.user, e.item));
    edges.dedup_by_key(|e| (e.user, e.item));

    let mut item_deg = vec![0.0; num_items];
    let mut user_deg = vec![0.0; num_users];
    let mut m_triplets = Vec::with_capacity(edges.len());
    let mut items_per_user: Vec<Vec<usize>> = vec![Vec::new(); num_users];
    for e in &edges {
        item_deg[e.item] += 1.0;
        user_deg[e.user] += 1.0;
        m_triplets.push((e.item, e.user, 1.0));
        items_per_user[e.user].push(e.item);
    }
    let m = SparseMatrix::from_triplets(num_items, num_users, &m_triplets);

    // Γ_ii entry (i, j) = d_i^{-1/2} d_j^{-1/2} Σ_u M[i,u] M[j,u] / b_u:
    // accumulate per-user cliques, then scale by the item degree factors.
    let mut ii_triplets = Vec::new();
    for u in 0..num_users {
        let items = &items_per_user[u];
        if items.is_empty() {
            continue;
        }
        let w = 1.0 / user_deg[u];
        for &i in items {
            for &j in items {
                ii_triplets.push((i, j, w * inv_sqrt_or_zero(item_deg[i]) * inv_sqrt_or_zero(item_deg[j])));
            }
        }
    }
    let gamma_ii = SparseMatrix::from_triplets(num_items, num_items, &ii_triplets);

    // Γ_ui entry (u, i) = b_u^{-1/2} M[i,u] d_i^{-1/2}
    let ui_triplets: Vec<(usize, usize, f64)> = edges
        .iter()
        .map(|e| (e.user, e.item, inv_sqrt_or_zero(user_deg[e.user]) * inv_sqrt_or_zero(item_deg[e.item])))
        .collect();
    let gamma_ui = SparseMatrix::from_triplets(num_users, num_items, &ui_triplets);

    SlotGraph {
        t,
        b,
        num_users,
        num_items,
        edges,
        m,
        item_deg,
        user_deg,
        gamma_ii: Arc::new(gamma_ii),
        gamma_ui: Arc::new(gamma_ui),
    }
}
