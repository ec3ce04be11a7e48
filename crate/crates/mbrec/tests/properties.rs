//! Property tests for the structural invariants that must hold on
//! arbitrary inputs, not just hand-picked fixtures.

use proptest::prelude::*;

use mbrec::data::{build_slot_graph, slice_slots, slot_of, InteractionEvent, SlotConfig, SlotEdge};
use mbrec::eval::rank_of_positive;
use mbrec::model::fusion::infonce;
use mbrec::tensor::{Graph, Tensor};

fn events_strategy() -> impl Strategy<Value = Vec<InteractionEvent>> {
    prop::collection::vec(
        (0usize..6, 0usize..9, 0usize..3, 0u64..2_000).prop_map(|(user, item, behavior, timestamp)| {
            InteractionEvent { user, item, behavior, timestamp }
        }),
        0..120,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Every event lands in exactly one (slot, behavior) bucket, and the
    /// buckets hold exactly the distinct (t, b, user, item) keys.
    #[test]
    fn slicing_partitions_events(events in events_strategy(), granularity in 1u64..500, num_slots in 1usize..6) {
        let cfg = SlotConfig::new(granularity, num_slots);
        let buckets = slice_slots(&events, &cfg, 3);
        let mut keys: Vec<(usize, usize, usize, usize)> = events
            .iter()
            .map(|e| {
                let (t, _) = slot_of(e.timestamp, &cfg);
                prop_assert!(t < num_slots);
                Ok((t, e.behavior, e.user, e.item))
            })
            .collect::<Result<_, _>>()?;
        keys.sort_unstable();
        keys.dedup();
        prop_assert_eq!(buckets.total_edges(), keys.len());
    }

    /// Softmax rows are probability vectors for any finite input.
    #[test]
    fn softmax_rows_are_probability_vectors(
        rows in 1usize..6,
        cols in 1usize..6,
        scale in 0.01f64..50.0,
        seed in prop::collection::vec(-1.0f64..1.0, 36),
    ) {
        let data: Vec<f64> = seed.iter().take(rows * cols).map(|v| v * scale).collect();
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(rows, cols, data));
        let y = g.softmax_rows(x);
        for r in 0..rows {
            let row = g.value(y).row(r);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            let sum: f64 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
        }
    }

    /// Row normalization yields unit rows, except exactly-zero rows, which
    /// stay zero.
    #[test]
    fn normalized_rows_are_unit_or_zero(
        rows in 1usize..5,
        cols in 1usize..6,
        mut seed in prop::collection::vec(-10.0f64..10.0, 30),
        zero_row in 0usize..5,
    ) {
        if zero_row < rows {
            for c in 0..cols {
                seed[zero_row * cols + c] = 0.0;
            }
        }
        let data: Vec<f64> = seed.iter().take(rows * cols).copied().collect();
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(rows, cols, data));
        let y = g.normalize_rows(x);
        for r in 0..rows {
            let norm: f64 = g.value(y).row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!(norm < 1e-12 || (norm - 1.0).abs() < 1e-12, "row {} norm {}", r, norm);
        }
    }

    /// The contrastive loss only sees cosines: positively rescaling any
    /// input leaves it unchanged.
    #[test]
    fn infonce_ignores_positive_rescaling(
        vals in prop::collection::vec(-1.0f64..1.0, 12),
        anchor_scale in 0.1f64..10.0,
        fused_scale in 0.1f64..10.0,
    ) {
        // keep rows clearly nonzero so normalization is well-conditioned
        let bump = |v: f64, i: usize| v + if i.is_multiple_of(3) { 1.5 } else { 0.0 };
        let a: Vec<f64> = vals.iter().take(6).enumerate().map(|(i, &v)| bump(v, i)).collect();
        let f: Vec<f64> = vals.iter().skip(6).enumerate().map(|(i, &v)| bump(v, i)).collect();

        let run = |sa: f64, sf: f64| -> f64 {
            let mut g = Graph::new();
            let at = g.constant(Tensor::matrix(2, 3, a.iter().map(|v| v * sa).collect()));
            let ft = g.constant(Tensor::matrix(2, 3, f.iter().map(|v| v * sf).collect()));
            let loss = infonce(&mut g, at, ft, 0.3).unwrap();
            g.value(loss).item()
        };
        let base = run(1.0, 1.0);
        let scaled = run(anchor_scale, fused_scale);
        prop_assert!((base - scaled).abs() < 1e-10, "{} vs {}", base, scaled);
    }

    /// Pessimistic ranking agrees with an explicit sort that places the
    /// positive after every tied negative.
    #[test]
    fn rank_matches_descending_sort_with_ties(
        pos_q in 0i32..8,
        negs_q in prop::collection::vec(0i32..8, 1..40),
    ) {
        let pos = pos_q as f64 / 7.0;
        let negs: Vec<f64> = negs_q.iter().map(|&v| v as f64 / 7.0).collect();
        let better_or_tied = negs.iter().filter(|&&s| s >= pos).count();
        prop_assert_eq!(rank_of_positive(pos, &negs), 1 + better_or_tied);

        let mut all: Vec<(f64, bool)> = negs.iter().map(|&s| (s, false)).collect();
        all.push((pos, true));
        all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then_with(|| a.1.cmp(&b.1)));
        let oracle = all.iter().position(|&(_, p)| p).unwrap() + 1;
        prop_assert_eq!(rank_of_positive(pos, &negs), oracle);
    }

    /// The normalized co-interaction adjacency is symmetric for any edge
    /// set, and isolated items keep all-zero rows.
    #[test]
    fn gamma_is_symmetric_with_zero_isolated_rows(
        edges_raw in prop::collection::vec((0usize..6, 0usize..6), 0..20),
    ) {
        let edges: Vec<SlotEdge> =
            edges_raw.iter().map(|&(user, item)| SlotEdge { user, item, dt: 0 }).collect();
        let sg = build_slot_graph(0, 0, &edges, 6, 6);
        prop_assert!(sg.gamma_ii.is_symmetric(1e-12));
        for i in 0..6 {
            if sg.item_deg[i] == 0.0 {
                prop_assert!(sg.gamma_ii.row_iter(i).all(|(_, v)| v == 0.0));
            }
        }
    }
}
