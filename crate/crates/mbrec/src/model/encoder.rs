//! Short-term per-slot graph encoder.
//!
//! For one (slot, behavior) graph: layered item-item message passing over
//! the normalized co-interaction adjacency, cross-layer concatenation and
//! projection, user aggregation over the normalized incidence (optionally
//! with sinusoidal edge-time context added to the item messages), and a
//! learned blend of the base item embeddings with the previous slot's
//! output so consecutive slots share structure.

use crate::data::SlotGraph;
use crate::tensor::{Graph, NodeId, Tensor};

use super::{names, ModelDims, ParamNodes};

/// Graph-node handles for one (slot, behavior) encoder application.
pub struct EncoderParamRefs {
    pub base: NodeId,
    pub w_item: Vec<NodeId>,
    pub slope_item: Vec<NodeId>,
    pub w_user: NodeId,
    pub slope_user: NodeId,
    pub w_cat: NodeId,
    pub w_zeta: NodeId,
    pub zeta: NodeId,
    pub temporal_injection: bool,
    pub granularity: u64,
}

impl EncoderParamRefs {
    pub fn resolve(dims: &ModelDims, nodes: &ParamNodes, t: usize, b: usize) -> Self {
        EncoderParamRefs {
            base: nodes.get(&names::item_base(b)),
            w_item: (0..dims.layers).map(|l| nodes.get(&names::w_item(dims, t, b, l))).collect(),
            slope_item: (0..dims.layers).map(|l| nodes.get(&names::slope_item(dims, t, b, l))).collect(),
            w_user: nodes.get(&names::w_user(dims, t, b)),
            slope_user: nodes.get(&names::slope_user(dims, t, b)),
            w_cat: nodes.get(&names::w_cat(dims, t, b)),
            w_zeta: nodes.get(&names::w_zeta(b)),
            zeta: nodes.get(&names::zeta(b)),
            temporal_injection: dims.temporal_injection,
            granularity: dims.granularity,
        }
    }
}

pub struct SlotEncodeOut {
    pub item: NodeId,
    pub user: NodeId,
}

/// Sinusoidal position vector: pairs (sin, cos) at geometrically spaced
/// wavelengths. `d` must be even.
pub fn temporal_encode(pos: f64, d: usize) -> Vec<f64> {
    assert!(d.is_multiple_of(2), "temporal encoding needs an even dimension");
    let mut p = vec![0.0; d];
    for k in 0..d / 2 {
        let freq = pos / 10_000f64.powf(2.0 * k as f64 / d as f64);
        p[2 * k] = freq.sin();
        p[2 * k + 1] = freq.cos();
    }
    p
}

/// Slot-relative position for an edge offset: fraction of the slot elapsed,
/// rescaled by 1000 so positions land in the informative range of the
/// sinusoid table regardless of granularity.
pub fn edge_position(dt: u64, granularity: u64) -> f64 {
    dt as f64 / granularity as f64 * 1000.0
}

/// Constant user×d matrix of aggregated edge-time context:
/// row u collects Γ_ui[u, i] · P(pos(Δt)) over the user's edges. Constant
/// with respect to every parameter, so it enters the graph as a leaf.
pub fn temporal_context_matrix(sg: &SlotGraph, d: usize, granularity: u64) -> Tensor {
    let mut t = Tensor::zeros(vec![sg.num_users, d]);
    for e in &sg.edges {
        let coeff = sg.gamma_ui.get(e.user, e.item);
        if coeff == 0.0 {
            continue;
        }
        let p = temporal_encode(edge_position(e.dt, granularity), d);
        let row = &mut t.data_mut()[e.user * d..(e.user + 1) * d];
        for j in 0..d {
            row[j] += coeff * p[j];
        }
    }
    t
}

/// Blend the base embeddings with the previous slot's learned ones:
/// (ζ·base + (1−ζ)·prev) · W. ζ is a learnable scalar kept in [0, 1] by
/// the optimizer.
pub fn init_priori(g: &mut Graph, base: NodeId, prev: NodeId, zeta: NodeId, w_zeta: NodeId) -> NodeId {
    let one = g.constant(Tensor::scalar(1.0));
    let one_minus = g.sub(one, zeta);
    let a = g.scale_by(zeta, base);
    let b = g.scale_by(one_minus, prev);
    let blend = g.add(a, b);
    g.matmul(blend, w_zeta)
}

/// One item-item propagation layer: PReLU(Γ_ii · E · W).
pub fn propagate_item_layer(
    g: &mut Graph,
    e_prev: NodeId,
    sg: &SlotGraph,
    w: NodeId,
    slope: NodeId,
) -> NodeId {
    let spread = g.spmm(sg.gamma_ii.clone(), e_prev);
    let projected = g.matmul(spread, w);
    g.prelu(projected, slope)
}

/// Concatenate the layer outputs along features, project back to d, and
/// row-normalize.
pub fn aggregate_layers(g: &mut Graph, layers: &[NodeId], w_cat: NodeId) -> NodeId {
    assert!(!layers.is_empty());
    let cat = if layers.len() == 1 { layers[0] } else { g.concat_cols(layers) };
    let projected = g.matmul(cat, w_cat);
    g.normalize_rows(projected)
}

/// User aggregation: PReLU((Γ_ui · E_item [+ time context]) · W), then
/// row-normalize. Without the time context this is plain normalized
/// aggregation of item messages.
pub fn propagate_user(
    g: &mut Graph,
    e_item: NodeId,
    sg: &SlotGraph,
    w_user: NodeId,
    slope: NodeId,
    temporal: Option<Tensor>,
) -> NodeId {
    let mut agg = g.spmm(sg.gamma_ui.clone(), e_item);
    if let Some(ctx) = temporal {
        let c = g.constant(ctx);
        agg = g.add(agg, c);
    }
    let projected = g.matmul(agg, w_user);
    let activated = g.prelu(projected, slope);
    g.normalize_rows(activated)
}

/// Full per-slot encoding. Slot 0 (or a disabled chain) starts from the
/// base embeddings directly; later slots blend in the previous slot first.
pub fn encode_slot(
    g: &mut Graph,
    sg: &SlotGraph,
    refs: &EncoderParamRefs,
    prev_item: Option<NodeId>,
    dims: &ModelDims,
) -> SlotEncodeOut {
    let e0 = match prev_item {
        Some(prev) => init_priori(g, refs.base, prev, refs.zeta, refs.w_zeta),
        None => refs.base,
    };

    let mut layers = Vec::with_capacity(dims.layers);
    let mut current = e0;
    for l in 0..dims.layers {
        current = propagate_item_layer(g, current, sg, refs.w_item[l], refs.slope_item[l]);
        layers.push(current);
    }
    let item = aggregate_layers(g, &layers, refs.w_cat);

    let temporal = if refs.temporal_injection {
        Some(temporal_context_matrix(sg, dims.embed_dim, refs.granularity))
    } else {
        None
    };
    let user = propagate_user(g, item, sg, refs.w_user, refs.slope_user, temporal);

    SlotEncodeOut { item, user }
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use std::collections::BTreeMap;

    use crate::data::{build_slot_graph, SlotEdge};
    use crate::model::{names, ModelParams, ParamNodes};
    use crate::tensor::{finite_diff_check, GradCheckConfig};

    use super::*;

    fn edge(user: usize, item: usize) -> SlotEdge {
        SlotEdge { user, item, dt: 0 }
    }

    fn dims_small(layers: usize, temporal: bool) -> ModelDims {
        ModelDims {
            num_users: 2,
            num_items: 3,
            num_behaviors: 1,
            num_slots: 2,
            embed_dim: 4,
            layers,
            heads: 1,
            granularity: 100,
            tie_weights_across_slots: true,
            temporal_injection: temporal,
            id_embeddings_only: false,
        }
    }

    #[test]
    fn temporal_encode_reference_values() {
        assert_eq!(temporal_encode(0.0, 4), vec![0.0, 1.0, 0.0, 1.0]);
        let p = temporal_encode(1.0, 4);
        let expect = [0.841471, 0.540302, 0.010000, 0.999950];
        for (a, e) in p.iter().zip(expect) {
            assert!((a - e).abs() < 1e-6, "{a} vs {e}");
        }
    }

    #[test]
    fn temporal_encode_pairs_are_unit() {
        for pos in [0.0, 0.37, 12.5, 997.0, 1e6] {
            let p = temporal_encode(pos, 8);
            for pair in p.chunks(2) {
                assert!((pair[0] * pair[0] + pair[1] * pair[1] - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn item_layer_identity_weights_reproduce_adjacency() {
        // Γ_ii of the 2×2 example has nonnegative entries, so the rectifier
        // is the identity and the layer output is Γ_ii itself.
        let sg = build_slot_graph(0, 0, &[edge(0, 0), edge(1, 0), edge(1, 1)], 2, 2);
        let mut g = Graph::new();
        let e = g.constant(Tensor::eye(2));
        let w = g.constant(Tensor::eye(2));
        let slope = g.constant(Tensor::scalar(0.25));
        let out = propagate_item_layer(&mut g, e, &sg, w, slope);
        assert!(g.value(out).max_abs_diff(&sg.gamma_ii.to_dense()) < 1e-12);
    }

    #[test]
    fn item_layer_on_empty_graph_is_zero() {
        let sg = build_slot_graph(0, 0, &[], 2, 2);
        let mut g = Graph::new();
        let e = g.constant(Tensor::matrix(2, 2, vec![1.0; 4]));
        let w = g.constant(Tensor::eye(2));
        let slope = g.constant(Tensor::scalar(0.25));
        let out = propagate_item_layer(&mut g, e, &sg, w, slope);
        assert_eq!(g.value(out).data(), &[0.0; 4]);
    }

    #[test]
    fn negative_preactivations_use_the_slope() {
        let sg = build_slot_graph(0, 0, &[edge(0, 0)], 1, 1);
        let mut g = Graph::new();
        let e = g.constant(Tensor::matrix(1, 1, vec![-2.0]));
        let w = g.constant(Tensor::eye(1));
        let slope = g.constant(Tensor::scalar(0.25));
        let out = propagate_item_layer(&mut g, e, &sg, w, slope);
        assert_eq!(g.value(out).data(), &[-0.5]);
    }

    #[test]
    fn aggregate_single_layer_identity_projection_normalizes() {
        let mut g = Graph::new();
        let layer = g.constant(Tensor::matrix(2, 2, vec![3.0, 4.0, 0.0, 0.0]));
        let w_cat = g.constant(Tensor::eye(2));
        let out = aggregate_layers(&mut g, &[layer], w_cat);
        assert_eq!(g.value(out).row(0), &[0.6, 0.8]);
        assert_eq!(g.value(out).row(1), &[0.0, 0.0], "zero rows stay zero");
    }

    #[test]
    fn init_priori_blend_cases() {
        let mut g = Graph::new();
        let base = g.constant(Tensor::matrix(1, 2, vec![2.0, 0.0]));
        let prev = g.constant(Tensor::matrix(1, 2, vec![0.0, 2.0]));
        let eye = g.constant(Tensor::eye(2));
        let one = g.constant(Tensor::scalar(1.0));
        let half = g.constant(Tensor::scalar(0.5));
        let zero = g.constant(Tensor::scalar(0.0));

        let full = init_priori(&mut g, base, prev, one, eye);
        assert_eq!(g.value(full).data(), &[2.0, 0.0]);
        let mid = init_priori(&mut g, base, prev, half, eye);
        assert_eq!(g.value(mid).data(), &[1.0, 1.0]);
        let none = init_priori(&mut g, base, prev, zero, eye);
        assert_eq!(g.value(none).data(), &[0.0, 2.0]);
    }

    #[test]
    fn user_from_single_edge_is_normalized_item_row() {
        // One edge, both degrees 1, identity weights, no time context:
        // the aggregation coefficient is 1 and the user row is the
        // normalized item row (nonnegative, so the rectifier is identity).
        let sg = build_slot_graph(0, 0, &[edge(0, 0)], 1, 1);
        let mut g = Graph::new();
        let item = g.constant(Tensor::matrix(1, 2, vec![3.0, 4.0]));
        // 1×1 graph has d = 2 embeddings here; widen Γ path via matmul with eye
        let w = g.constant(Tensor::eye(2));
        let slope = g.constant(Tensor::scalar(0.25));
        let out = propagate_user(&mut g, item, &sg, w, slope, None);
        assert!(g.value(out).max_abs_diff(&Tensor::matrix(1, 2, vec![0.6, 0.8])) < 1e-12);
    }

    #[test]
    fn user_with_no_edges_gets_zero_row() {
        let sg = build_slot_graph(0, 0, &[edge(0, 0)], 2, 1);
        let mut g = Graph::new();
        let item = g.constant(Tensor::matrix(1, 2, vec![1.0, 1.0]));
        let w = g.constant(Tensor::eye(2));
        let slope = g.constant(Tensor::scalar(0.25));
        let out = propagate_user(&mut g, item, &sg, w, slope, None);
        assert_eq!(g.value(out).row(1), &[0.0, 0.0]);
    }

    #[test]
    fn temporal_context_at_zero_offset_adds_the_base_sinusoid() {
        // Single edge with Δt = 0 and unit coefficient: context row is
        // exactly P(0) = [0, 1, 0, 1].
        let sg = build_slot_graph(0, 0, &[edge(0, 0)], 1, 1);
        let ctx = temporal_context_matrix(&sg, 4, 100);
        assert_eq!(ctx.row(0), &[0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn encode_slot_empty_graph_yields_zero_tables() {
        let dims = dims_small(1, false);
        let sg = build_slot_graph(0, 0, &[], dims.num_users, dims.num_items);
        let params = ModelParams::init(dims.clone(), 0.5, 7);
        let mut g = Graph::new();
        let nodes = params.register(&mut g);
        let refs = EncoderParamRefs::resolve(&dims, &nodes, 0, 0);
        let out = encode_slot(&mut g, &sg, &refs, None, &dims);
        assert!(g.value(out.item).data().iter().all(|&v| v == 0.0));
        assert!(g.value(out.user).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encode_slot_matches_hand_composed_dense_oracle() {
        // L = 1, identity weights, the 2-item/2-user graph. The composition
        // is: normalize(Γ_ii · E₀) for items (entries nonnegative), then
        // normalize(Γ_ui · E_item) for users.
        let _dims = ModelDims { num_items: 2, layers: 1, temporal_injection: false, ..dims_small(1, false) };
        let sg = build_slot_graph(0, 0, &[edge(0, 0), edge(1, 0), edge(1, 1)], 2, 2);

        let mut g = Graph::new();
        let e0 = Tensor::matrix(2, 4, vec![1.0, 0.0, 0.5, 0.0, 0.0, 1.0, 0.0, 0.5]);
        let base = g.param("base", e0.clone());
        let eye = g.constant(Tensor::eye(4));
        let w_cat = g.constant(Tensor::eye(4));
        let slope = g.constant(Tensor::scalar(0.25));

        let layer = propagate_item_layer(&mut g, base, &sg, eye, slope);
        let item = aggregate_layers(&mut g, &[layer], w_cat);
        let user = propagate_user(&mut g, item, &sg, eye, slope, None);

        // dense oracle
        let gam_ii = sg.gamma_ii.to_dense();
        let gam_ui = sg.gamma_ui.to_dense();
        let norm = |t: &Tensor| crate::tensor::graph::normalize_rows_value(t);
        let mut spread = Tensor::zeros(vec![2, 4]);
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..4 {
                    spread.data_mut()[i * 4 + k] += gam_ii.get2(i, j) * e0.get2(j, k);
                }
            }
        }
        let item_oracle = norm(&spread);
        let mut agg = Tensor::zeros(vec![2, 4]);
        for u in 0..2 {
            for i in 0..2 {
                for k in 0..4 {
                    agg.data_mut()[u * 4 + k] += gam_ui.get2(u, i) * item_oracle.get2(i, k);
                }
            }
        }
        let user_oracle = norm(&agg);

        assert!(g.value(item).max_abs_diff(&item_oracle) < 1e-10);
        assert!(g.value(user).max_abs_diff(&user_oracle) < 1e-10);
    }

    #[test]
    fn encode_slot_rows_are_unit_or_zero() {
        let dims = dims_small(2, true);
        let sg = build_slot_graph(0, 0, &[edge(0, 0), edge(1, 0), edge(1, 1)], 2, 3);
        let params = ModelParams::init(dims.clone(), 0.5, 3);
        let mut g = Graph::new();
        let nodes = params.register(&mut g);
        let refs = EncoderParamRefs::resolve(&dims, &nodes, 0, 0);
        let out = encode_slot(&mut g, &sg, &refs, None, &dims);
        for table in [out.item, out.user] {
            let t = g.value(table);
            for r in 0..t.rows() {
                let norm: f64 = t.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!(norm.abs() < 1e-12 || (norm - 1.0).abs() < 1e-12, "row norm {norm}");
            }
        }
    }

    #[test]
    fn permuting_item_ids_permutes_output_rows() {
        let dims = ModelDims { num_items: 3, ..dims_small(2, false) };
        let params = ModelParams::init(dims.clone(), 0.5, 11);
        let edges = [edge(0, 0), edge(0, 2), edge(1, 1), edge(1, 2)];
        // permutation π: 0→2, 1→0, 2→1 applied to item ids
        let perm = [2usize, 0, 1];
        let edges_p: Vec<SlotEdge> = edges.iter().map(|e| SlotEdge { item: perm[e.item], ..*e }).collect();

        let run = |edges: &[SlotEdge], base: Tensor| -> (Tensor, Tensor) {
            let sg = build_slot_graph(0, 0, edges, dims.num_users, dims.num_items);
            let mut g = Graph::new();
            let mut values = params.values().clone();
            values.insert(names::item_base(0), base);
            let mut ids = BTreeMap::new();
            for (name, t) in &values {
                ids.insert(name.clone(), g.param(name, t.clone()));
            }
            let nodes = ParamNodes::from_ids(ids);
            let refs = EncoderParamRefs::resolve(&dims, &nodes, 0, 0);
            let out = encode_slot(&mut g, &sg, &refs, None, &dims);
            (g.value(out.item).clone(), g.value(out.user).clone())
        };

        let base = params.get(&names::item_base(0)).clone();
        let mut base_p = Tensor::zeros(vec![3, 4]);
        for i in 0..3 {
            base_p.data_mut()[perm[i] * 4..(perm[i] + 1) * 4].copy_from_slice(base.row(i));
        }

        let (item, user) = run(&edges, base);
        let (item_p, user_p) = run(&edges_p, base_p);
        for i in 0..3 {
            for k in 0..4 {
                assert!((item.get2(i, k) - item_p.get2(perm[i], k)).abs() < 1e-12);
            }
        }
        assert!(user.max_abs_diff(&user_p) < 1e-12, "user side is untouched by item relabeling");
    }

    #[test]
    fn encoder_gradients_pass_finite_differences() {
        // Two chained slots so the priori blend, its projection, and the
        // blend scalar all receive gradients.
        let dims = dims_small(2, true);
        let sg0 = build_slot_graph(0, 0, &[edge(0, 0), edge(1, 1), edge(1, 2)], 2, 3);
        let sg1 = build_slot_graph(1, 0, &[edge(0, 1), edge(1, 0)], 2, 3);
        let params = ModelParams::init(dims.clone(), 0.5, 19);

        let report = finite_diff_check(
            |g, ids| {
                let nodes = ParamNodes::from_ids(ids.clone());
                let refs = EncoderParamRefs::resolve(&dims, &nodes, 0, 0);
                let s0 = encode_slot(g, &sg0, &refs, None, &dims);
                let s1 = encode_slot(g, &sg1, &refs, Some(s0.item), &dims);
                // fixed projection of both outputs
                let pu = g.constant(Tensor::matrix(2, 4, (0..8).map(|v| (v as f64 * 0.7).sin()).collect()));
                let pi = g.constant(Tensor::matrix(3, 4, (0..12).map(|v| (v as f64 * 0.3).cos()).collect()));
                let a = g.dot(s1.user, pu);
                let b = g.dot(s1.item, pi);
                g.add(a, b)
            },
            params.values(),
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.passed(), "{:?}", report.failures());
    }

    #[test]
    fn disabled_injection_is_plain_normalized_aggregation() {
        // With temporal context off, the user table must equal the dense
        // Γ_ui · E_item · W composition exactly.
        let sg = build_slot_graph(0, 0, &[edge(0, 0), edge(0, 1), edge(1, 1)], 2, 2);
        let mut g = Graph::new();
        let item_vals = Tensor::matrix(2, 3, vec![0.2, 0.5, 0.1, 0.9, 0.4, 0.7]);
        let item = g.constant(item_vals.clone());
        let w = g.constant(Tensor::eye(3));
        let slope = g.constant(Tensor::scalar(0.25));
        let out = propagate_user(&mut g, item, &sg, w, slope, None);

        let gam = sg.gamma_ui.to_dense();
        let mut agg = Tensor::zeros(vec![2, 3]);
        for u in 0..2 {
            for i in 0..2 {
                for k in 0..3 {
                    agg.data_mut()[u * 3 + k] += gam.get2(u, i) * item_vals.get2(i, k);
                }
            }
        }
        let oracle = crate::tensor::graph::normalize_rows_value(&agg);
        assert!(g.value(out).max_abs_diff(&oracle) < 1e-12);
    }
}
