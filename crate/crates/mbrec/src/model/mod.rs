//! The recommender model: short-term per-slot graph encoding, the
//! cross-behavior attention memory over adjacent slots, gated behavior
//! fusion, and the contrastive objectives.
//!
//! All forward computation is expressed on a [`Graph`], so one backward
//! pass differentiates the whole composite objective with respect to every
//! named parameter.

pub mod encoder;
pub mod fusion;
pub mod memory;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::Dataset;
use crate::tensor::{Graph, NodeId, Tensor};

/// Everything that determines the parameter set and forward wiring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    pub num_users: usize,
    pub num_items: usize,
    pub num_behaviors: usize,
    pub num_slots: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub granularity: u64,
    pub tie_weights_across_slots: bool,
    pub temporal_injection: bool,
    /// Replace the graph encoder with plain learnable id embeddings
    /// (the no-message-passing variant).
    pub id_embeddings_only: bool,
}

impl ModelDims {
    pub fn from_config(cfg: &RunConfig, num_users: usize, num_items: usize, num_behaviors: usize) -> Self {
        ModelDims {
            num_users,
            num_items,
            num_behaviors,
            num_slots: cfg.num_slots,
            embed_dim: cfg.embed_dim,
            layers: cfg.layers,
            heads: cfg.heads,
            granularity: cfg.granularity,
            tie_weights_across_slots: cfg.tie_weights_across_slots,
            temporal_injection: cfg.temporal_injection,
            id_embeddings_only: false,
        }
    }

    /// Slot tag used in parameter names: empty when weights are tied across
    /// slots, `t{t}.` otherwise.
    fn slot_tag(&self, t: usize) -> String {
        if self.tie_weights_across_slots {
            String::new()
        } else {
            format!("t{t}.")
        }
    }
}

/// Parameter names; a single place so the trainer, the checkpoints, and
/// the gradient checks all agree.
pub mod names {
    use super::ModelDims;

    pub fn item_base(b: usize) -> String {
        format!("item_base.b{b}")
    }
    pub fn id_user(b: usize) -> String {
        format!("id.user.b{b}")
    }
    pub fn id_item(b: usize) -> String {
        format!("id.item.b{b}")
    }
    pub fn w_item(dims: &ModelDims, t: usize, b: usize, l: usize) -> String {
        format!("enc.w_item.{}b{b}.l{l}", dims.slot_tag(t))
    }
    pub fn slope_item(dims: &ModelDims, t: usize, b: usize, l: usize) -> String {
        format!("enc.slope_item.{}b{b}.l{l}", dims.slot_tag(t))
    }
    pub fn w_user(dims: &ModelDims, t: usize, b: usize) -> String {
        format!("enc.w_user.{}b{b}", dims.slot_tag(t))
    }
    pub fn slope_user(dims: &ModelDims, t: usize, b: usize) -> String {
        format!("enc.slope_user.{}b{b}", dims.slot_tag(t))
    }
    pub fn w_cat(dims: &ModelDims, t: usize, b: usize) -> String {
        format!("enc.w_cat.{}b{b}", dims.slot_tag(t))
    }
    pub fn w_zeta(b: usize) -> String {
        format!("enc.w_zeta.b{b}")
    }
    pub fn zeta(b: usize) -> String {
        format!("enc.zeta.b{b}")
    }
    pub const MEM_W_Q: &str = "mem.w_q";
    pub const MEM_W_K: &str = "mem.w_k";
    pub const FUSE_W_F: &str = "fuse.w_f";
}

/// Every trainable tensor of the model, addressable by name.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub dims: ModelDims,
    values: BTreeMap<String, Tensor>,
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-limit..limit)).collect();
    Tensor::matrix(rows, cols, data)
}

impl ModelParams {
    /// Xavier-initialized parameters; activation slopes start at the
    /// conventional 0.25 and the blend scalars at `zeta_init`.
    pub fn init(dims: ModelDims, zeta_init: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = dims.embed_dim;
        let mut values = BTreeMap::new();

        if dims.id_embeddings_only {
            for b in 0..dims.num_behaviors {
                values.insert(names::id_user(b), xavier(&mut rng, dims.num_users, d));
                values.insert(names::id_item(b), xavier(&mut rng, dims.num_items, d));
            }
        } else {
            let slot_range = if dims.tie_weights_across_slots { 1 } else { dims.num_slots };
            for b in 0..dims.num_behaviors {
                values.insert(names::item_base(b), xavier(&mut rng, dims.num_items, d));
                for t in 0..slot_range {
                    for l in 0..dims.layers {
                        values.insert(names::w_item(&dims, t, b, l), xavier(&mut rng, d, d));
                        values.insert(names::slope_item(&dims, t, b, l), Tensor::scalar(0.25));
                    }
                    values.insert(names::w_user(&dims, t, b), xavier(&mut rng, d, d));
                    values.insert(names::slope_user(&dims, t, b), Tensor::scalar(0.25));
                    values.insert(names::w_cat(&dims, t, b), xavier(&mut rng, dims.layers * d, d));
                }
                values.insert(names::w_zeta(b), xavier(&mut rng, d, d));
                values.insert(names::zeta(b), Tensor::scalar(zeta_init));
            }
        }
        values.insert(names::MEM_W_Q.to_string(), xavier(&mut rng, d, d));
        values.insert(names::MEM_W_K.to_string(), xavier(&mut rng, d, d));
        values.insert(names::FUSE_W_F.to_string(), xavier(&mut rng, d, 1));

        ModelParams { dims, values }
    }

    pub fn values(&self) -> &BTreeMap<String, Tensor> {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.values
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.values.get(name).unwrap_or_else(|| panic!("no parameter {name}"))
    }

    pub fn from_values(dims: ModelDims, values: BTreeMap<String, Tensor>) -> Self {
        ModelParams { dims, values }
    }

    /// Register every parameter as a named graph leaf.
    pub fn register(&self, g: &mut Graph) -> ParamNodes {
        let mut ids = BTreeMap::new();
        for (name, tensor) in &self.values {
            ids.insert(name.clone(), g.param(name, tensor.clone()));
        }
        ParamNodes { ids }
    }
}

/// Node ids of registered parameters within one graph.
pub struct ParamNodes {
    ids: BTreeMap<String, NodeId>,
}

impl ParamNodes {
    pub fn get(&self, name: &str) -> NodeId {
        *self.ids.get(name).unwrap_or_else(|| panic!("parameter {name} not registered"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.ids.iter().map(|(k, &v)| (k.as_str(), v))
    }

    /// Wrap externally created nodes (used by tests that build tiny models
    /// by hand).
    pub fn from_ids(ids: BTreeMap<String, NodeId>) -> Self {
        ParamNodes { ids }
    }
}

/// Forward-pass handles for everything the objectives consume.
pub struct ForwardOutputs {
    /// Per-slot per-behavior user tables, indexed `[t][b]`.
    pub slot_user: Vec<Vec<NodeId>>,
    /// Per-slot per-behavior item tables, indexed `[t][b]`.
    pub slot_item: Vec<Vec<NodeId>>,
    /// Per-slot gate-fused user tables (short-horizon contrastive views).
    pub short_fused_user: Vec<NodeId>,
    /// Final-slot refined per-behavior user tables.
    pub refined_user: Vec<NodeId>,
    /// Final-slot refined per-behavior item tables.
    pub refined_item: Vec<NodeId>,
    /// Gate-fused final user representation (scoring side).
    pub fused_user: NodeId,
    /// Gate-fused final item representation (scoring side).
    pub fused_item: NodeId,
    /// Attention weight tables `[b][head]` (each N×B) from the last
    /// slot transition of the user chain, when one exists.
    pub user_attention: Option<Vec<Vec<NodeId>>>,
}

/// Build the full forward pass on `g` and return handles to the tables the
/// losses and the scorer need.
pub fn build_forward(g: &mut Graph, dims: &ModelDims, nodes: &ParamNodes, data: &Dataset) -> ForwardOutputs {
    assert_eq!(dims.num_slots, data.num_slots(), "slot count mismatch");
    assert_eq!(dims.num_behaviors, data.num_behaviors(), "behavior count mismatch");

    let mut slot_user: Vec<Vec<NodeId>> = vec![Vec::new(); dims.num_slots];
    let mut slot_item: Vec<Vec<NodeId>> = vec![Vec::new(); dims.num_slots];

    if dims.id_embeddings_only {
        for t in 0..dims.num_slots {
            for b in 0..dims.num_behaviors {
                slot_user[t].push(nodes.get(&names::id_user(b)));
                slot_item[t].push(nodes.get(&names::id_item(b)));
            }
        }
    } else {
        for b in 0..dims.num_behaviors {
            let mut prev_item: Option<NodeId> = None;
            for t in 0..dims.num_slots {
                let refs = encoder::EncoderParamRefs::resolve(dims, nodes, t, b);
                let out = encoder::encode_slot(g, &data.graphs[t][b], &refs, prev_item, dims);
                slot_user[t].push(out.user);
                slot_item[t].push(out.item);
                prev_item = Some(out.item);
            }
        }
    }

    let w_f = nodes.get(names::FUSE_W_F);
    let short_fused_user: Vec<NodeId> =
        (0..dims.num_slots).map(|t| fusion::gate_fuse(g, &slot_user[t], w_f).fused).collect();

    let w_q = nodes.get(names::MEM_W_Q);
    let w_k = nodes.get(names::MEM_W_K);
    let user_chain = memory::run_memory_chain(g, &slot_user, w_q, w_k, dims.heads);
    let item_chain = memory::run_memory_chain(g, &slot_item, w_q, w_k, dims.heads);

    let fused_user = fusion::gate_fuse(g, &user_chain.final_tables, w_f).fused;
    let fused_item = fusion::gate_fuse(g, &item_chain.final_tables, w_f).fused;

    ForwardOutputs {
        slot_user,
        slot_item,
        short_fused_user,
        refined_user: user_chain.final_tables,
        refined_item: item_chain.final_tables,
        fused_user,
        fused_item,
        user_attention: user_chain.last_attention,
    }
}

/// Forward-only evaluation: the fused user and item tables as plain values.
pub fn final_embeddings(params: &ModelParams, data: &Dataset) -> (Tensor, Tensor) {
    let mut g = Graph::new();
    let nodes = params.register(&mut g);
    let out = build_forward(&mut g, &params.dims, &nodes, data);
    (g.value(out.fused_user).clone(), g.value(out.fused_item).clone())
}

/// Forward-only snapshot of the user-side cross-behavior attention weights
/// at the last slot transition: `[query behavior][head]` tables of shape
/// users × |B|. `None` in single-slot mode where no transition exists.
pub fn user_attention_snapshot(params: &ModelParams, data: &Dataset) -> Option<Vec<Vec<Tensor>>> {
    let mut g = Graph::new();
    let nodes = params.register(&mut g);
    let out = build_forward(&mut g, &params.dims, &nodes, data);
    out.user_attention.map(|maps| {
        maps.iter()
            .map(|heads| heads.iter().map(|&id| g.value(id).clone()).collect())
            .collect()
    })
}
