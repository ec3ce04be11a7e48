//! Pairwise ranking loss, joint objective assembly, negative sampling, and
//! the training loop.
//!
//! Each step encodes every slot, builds the per-slot fused views for the
//! short-horizon contrastive terms, runs the memory chain, builds the final
//! fused views for the long-horizon term and the ranking loss, assembles
//! the joint objective, backpropagates once, and applies one optimizer
//! update. Single-threaded execution with a fixed seed is bit-reproducible.

pub mod optim;

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::RunConfig;
use crate::data::Dataset;
use crate::eval::{evaluate_embeddings, EvalError, EvalSplit};
use crate::model::{build_forward, fusion, names, ModelDims, ModelParams, ParamNodes};
use crate::tensor::{DiffError, Graph, NodeId, Tensor};

use optim::{clip_global_norm, lr_at_epoch, AdamW};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("need at least 2 users with target-behavior interactions, found {0}")]
    NotEnoughUsers(usize),
    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// One pairwise ranking sample: the user prefers `pos` over `neg`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triple {
    pub user: usize,
    pub pos: usize,
    pub neg: usize,
}

/// Sample ranking triples for the given users under one behavior: the
/// positive uniform over the user's observed items, the negative uniform
/// over unobserved ones (rejection sampling). Users whose observed set
/// covers the whole catalog are returned in the skip list.
pub fn sample_triples(
    ds: &Dataset,
    users: &[usize],
    behavior: usize,
    per_user: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<Triple>, Vec<usize>) {
    let num_items = ds.num_items();
    let observed = &ds.user_items_by_behavior[behavior];
    let mut triples = Vec::with_capacity(users.len() * per_user);
    let mut skipped = Vec::new();
    for &u in users {
        let items = &observed[u];
        if items.is_empty() {
            continue;
        }
        if items.len() >= num_items {
            skipped.push(u);
            continue;
        }
        for _ in 0..per_user {
            let pos = items[rng.gen_range(0..items.len())];
            let neg = loop {
                let cand = rng.gen_range(0..num_items);
                if items.binary_search(&cand).is_err() {
                    break cand;
                }
            };
            triples.push(Triple { user: u, pos, neg });
        }
    }
    (triples, skipped)
}

/// Mean over triples of −log(sigmoid(score⁺ − score⁻)) on the fused
/// embeddings. The L2 penalty is kept separate (see [`l2_penalty`]).
pub fn bpr_rank_loss(g: &mut Graph, fused_user: NodeId, fused_item: NodeId, triples: &[Triple]) -> NodeId {
    assert!(!triples.is_empty(), "ranking loss over zero triples");
    let users: Vec<usize> = triples.iter().map(|t| t.user).collect();
    let pos: Vec<usize> = triples.iter().map(|t| t.pos).collect();
    let neg: Vec<usize> = triples.iter().map(|t| t.neg).collect();
    let u = g.gather_rows(fused_user, users);
    let p = g.gather_rows(fused_item, pos);
    let n = g.gather_rows(fused_item, neg);
    let s_pos = g.row_dot(u, p);
    let s_neg = g.row_dot(u, n);
    let diff = g.sub(s_pos, s_neg);
    let sig = g.sigmoid(diff);
    let lg = g.log(sig);
    let m = g.mean(lg);
    g.scale(m, -1.0)
}

/// λ · Σ over all trainable parameters of the squared Frobenius norm.
pub fn l2_penalty(g: &mut Graph, nodes: &ParamNodes, lambda: f64) -> NodeId {
    let ids: Vec<NodeId> = nodes.iter().map(|(_, id)| id).collect();
    let mut acc: Option<NodeId> = None;
    for id in ids {
        let sq = g.dot(id, id);
        acc = Some(match acc {
            Some(a) => g.add(a, sq),
            None => sq,
        });
    }
    let total = acc.expect("at least one parameter");
    g.scale(total, lambda)
}

/// The ranking loss as reported and optimized: mean pairwise term plus the
/// L2 penalty over all parameters.
pub fn bpr_loss(
    g: &mut Graph,
    fused_user: NodeId,
    fused_item: NodeId,
    triples: &[Triple],
    lambda: f64,
    nodes: &ParamNodes,
) -> NodeId {
    let rank = bpr_rank_loss(g, fused_user, fused_item, triples);
    let reg = l2_penalty(g, nodes, lambda);
    g.add(rank, reg)
}

/// Everything sampled or derived for one optimization step.
pub struct StepBatch {
    /// Users participating in this step's contrastive terms.
    pub users: Vec<usize>,
    /// Target-behavior ranking triples.
    pub triples: Vec<Triple>,
    /// Extra per-behavior triples when ranking trains on all behaviors.
    pub aux_triples: Vec<Vec<Triple>>,
    /// Users with interactions per (slot, behavior) — the short-horizon
    /// contrastive batches. Indexed `[t][b]`.
    pub short_batches: Vec<Vec<Vec<usize>>>,
}

impl StepBatch {
    /// Restrict the step's users to those active in each (slot, behavior)
    /// graph; inactive users have zero rows there and are excluded.
    pub fn short_batches_for(ds: &Dataset, users: &[usize]) -> Vec<Vec<Vec<usize>>> {
        (0..ds.num_slots())
            .map(|t| {
                (0..ds.num_behaviors())
                    .map(|b| {
                        let deg = &ds.graphs[t][b].user_deg;
                        users.iter().copied().filter(|&u| deg[u] > 0.0).collect()
                    })
                    .collect()
            })
            .collect()
    }
}

/// Handles to the assembled objective.
pub struct LossBreakdown {
    pub total: NodeId,
    pub bpr: NodeId,
    /// Unweighted contrastive terms; `None` when the ranking-only path is
    /// taken and they are never built.
    pub cl_long: Option<NodeId>,
    pub cl_short: Option<NodeId>,
}

/// Assemble the joint objective on `g`:
/// ranking + α · long-horizon contrastive + β · short-horizon contrastive.
/// With `bpr_only` the contrastive sub-graphs are not constructed at all.
pub fn build_total_loss(
    g: &mut Graph,
    dims: &ModelDims,
    nodes: &ParamNodes,
    ds: &Dataset,
    batch: &StepBatch,
    cfg: &RunConfig,
) -> LossBreakdown {
    let fwd = build_forward(g, dims, nodes, ds);

    let mut bpr = bpr_loss(g, fwd.fused_user, fwd.fused_item, &batch.triples, cfg.l2_lambda, nodes);
    for triples in &batch.aux_triples {
        if !triples.is_empty() {
            let term = bpr_rank_loss(g, fwd.fused_user, fwd.fused_item, triples);
            bpr = g.add(bpr, term);
        }
    }

    if cfg.bpr_only {
        return LossBreakdown { total: bpr, bpr, cl_long: None, cl_short: None };
    }

    let mut cl_long = fusion::long_term_loss(g, &fwd.refined_user, fwd.fused_user, &batch.users, cfg.tau);
    if cfg.item_contrast {
        let mut items: Vec<usize> = batch
            .triples
            .iter()
            .flat_map(|t| [t.pos, t.neg])
            .collect();
        items.sort_unstable();
        items.dedup();
        let item_term = fusion::long_term_loss(g, &fwd.refined_item, fwd.fused_item, &items, cfg.tau);
        cl_long = g.add(cl_long, item_term);
    }
    let cl_short = fusion::short_term_loss(g, &fwd.slot_user, &fwd.short_fused_user, &batch.short_batches, cfg.tau);

    let weighted_long = g.scale(cl_long, cfg.alpha);
    let weighted_short = g.scale(cl_short, cfg.beta);
    let partial = g.add(bpr, weighted_long);
    let total = g.add(partial, weighted_short);

    LossBreakdown { total, bpr, cl_long: Some(cl_long), cl_short: Some(cl_short) }
}

/// One line of the per-epoch training log. Contrastive columns carry the
/// weighted contributions (α·long, β·short), so the loss columns sum to
/// the total and a disabled term reads exactly zero.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub bpr: f64,
    pub cl_long: f64,
    pub cl_short: f64,
    pub total: f64,
    pub hr10: Option<f64>,
    pub ndcg10: Option<f64>,
}

pub fn epoch_log_csv(records: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,bpr,cl_long,cl_short,total,hr@10,ndcg@10\n");
    for r in records {
        let fmt_opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{},{}\n",
            r.epoch,
            r.bpr,
            r.cl_long,
            r.cl_short,
            r.total,
            fmt_opt(r.hr10),
            fmt_opt(r.ndcg10),
        ));
    }
    out
}

pub struct TrainOutcome {
    pub params: ModelParams,
    pub epochs: Vec<EpochRecord>,
    /// Users excluded from ranking because they interacted with every item.
    pub saturated_users: Vec<usize>,
}

/// Train with the standard model wiring.
pub fn train(ds: &Dataset, cfg: &RunConfig, split: Option<&EvalSplit>) -> Result<TrainOutcome, TrainError> {
    let dims = ModelDims::from_config(cfg, ds.num_users(), ds.num_items(), ds.num_behaviors());
    train_with_dims(ds, cfg, dims, split)
}

/// Train with explicit dims (ablations swap in the id-embedding variant).
pub fn train_with_dims(
    ds: &Dataset,
    cfg: &RunConfig,
    dims: ModelDims,
    split: Option<&EvalSplit>,
) -> Result<TrainOutcome, TrainError> {
    let num_items = ds.num_items();
    let eligible: Vec<usize> = (0..ds.num_users())
        .filter(|&u| {
            let n = ds.user_target_items[u].len();
            n >= 1 && n < num_items
        })
        .collect();
    if eligible.len() < 2 {
        return Err(TrainError::NotEnoughUsers(eligible.len()));
    }
    let saturated: Vec<usize> =
        (0..ds.num_users()).filter(|&u| ds.user_target_items[u].len() >= num_items).collect();
    if !saturated.is_empty() {
        eprintln!(
            "warning: {} user(s) interact with every item and are skipped in ranking",
            saturated.len()
        );
    }

    let mut params = ModelParams::init(dims.clone(), cfg.zeta_init, cfg.seed);
    let mut opt = AdamW::new(cfg.weight_decay);
    // separate stream from parameter init, still seed-determined
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9e3779b97f4a7c15));

    let mut records = Vec::with_capacity(cfg.epochs);
    let mut order = eligible.clone();

    for epoch in 0..cfg.epochs {
        let lr = lr_at_epoch(&cfg.lr_schedule, cfg.learning_rate, epoch);
        order.shuffle(&mut rng);

        let mut sums = (0.0, 0.0, 0.0, 0.0); // bpr, α·long, β·short, total
        let mut steps = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let mut users = chunk.to_vec();
            users.sort_unstable();

            let (triples, _) = sample_triples(ds, &users, ds.catalog.target(), cfg.negatives_per_positive, &mut rng);
            if triples.is_empty() {
                continue;
            }
            let aux_triples = if cfg.bpr_all_behaviors {
                (0..ds.num_behaviors())
                    .filter(|&b| b != ds.catalog.target())
                    .map(|b| sample_triples(ds, &users, b, cfg.negatives_per_positive, &mut rng).0)
                    .collect()
            } else {
                Vec::new()
            };
            let short_batches = StepBatch::short_batches_for(ds, &users);
            let batch = StepBatch { users, triples, aux_triples, short_batches };

            let mut g = Graph::new();
            let nodes = params.register(&mut g);
            let losses = build_total_loss(&mut g, &dims, &nodes, ds, &batch, cfg);

            let total_value = g.value(losses.total).item();
            if !total_value.is_finite() {
                return Err(TrainError::Diverged { epoch, step: steps, loss: total_value });
            }

            let bpr_value = g.value(losses.bpr).item();
            let long_value = losses.cl_long.map_or(0.0, |id| cfg.alpha * g.value(id).item());
            let short_value = losses.cl_short.map_or(0.0, |id| cfg.beta * g.value(id).item());

            let mut grads = g.grad(losses.total)?.into_by_name();
            clip_global_norm(&mut grads, cfg.grad_clip_norm);
            opt.step(params.values_mut(), &grads, lr);
            clamp_blend_scalars(&mut params);

            sums.0 += bpr_value;
            sums.1 += long_value;
            sums.2 += short_value;
            sums.3 += total_value;
            steps += 1;
        }

        let inv = if steps > 0 { 1.0 / steps as f64 } else { 0.0 };
        let mut record = EpochRecord {
            epoch,
            bpr: sums.0 * inv,
            cl_long: sums.1 * inv,
            cl_short: sums.2 * inv,
            total: sums.3 * inv,
            hr10: None,
            ndcg10: None,
        };
        if let Some(split) = split {
            if cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0 {
                let (user_emb, item_emb) = crate::model::final_embeddings(&params, ds);
                let report =
                    evaluate_embeddings(&user_emb, &item_emb, split, &[10], &ds.user_event_counts, cfg.threads)?;
                record.hr10 = Some(report.hr_at(10));
                record.ndcg10 = Some(report.ndcg_at(10));
            }
        }
        records.push(record);
    }

    Ok(TrainOutcome { params, epochs: records, saturated_users: saturated })
}

/// The blend scalars live in [0, 1]; project them back after each step.
fn clamp_blend_scalars(params: &mut ModelParams) {
    for b in 0..params.dims.num_behaviors {
        let name = names::zeta(b);
        if let Some(t) = params.values_mut().get_mut(&name) {
            let v = t.data_mut();
            v[0] = v[0].clamp(0.0, 1.0);
        }
    }
}

// ── Checkpoints ─────────────────────────────────────────────────────────

#[derive(Debug, Serialize, Deserialize)]
pub struct TensorData {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Self-describing parameter snapshot: named tensors plus the hash of the
/// configuration that produced them.
#[derive(Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config_hash: String,
    pub dims: ModelDims,
    pub params: BTreeMap<String, TensorData>,
}

impl Checkpoint {
    pub fn from_params(params: &ModelParams, cfg: &RunConfig) -> Self {
        let map = params
            .values()
            .iter()
            .map(|(k, t)| (k.clone(), TensorData { shape: t.shape().to_vec(), data: t.data().to_vec() }))
            .collect();
        Checkpoint {
            config_hash: format!("{:016x}", cfg.stable_hash()),
            dims: params.dims.clone(),
            params: map,
        }
    }

    pub fn into_params(self) -> ModelParams {
        let values = self
            .params
            .into_iter()
            .map(|(k, td)| (k, Tensor::new(td.shape, td.data)))
            .collect();
        ModelParams::from_values(self.dims, values)
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

// ── Full-objective gradient check ───────────────────────────────────────

/// Finite-difference check of the complete joint objective on a minimal
/// model: 2 behaviors, 2 slots, 6 users, 8 items, d = 4, one layer.
pub fn full_objective_gradcheck(
    seed: u64,
    eps: f64,
    tol: f64,
) -> Result<crate::tensor::GradCheckReport, TrainError> {
    use crate::data::{synth_generate, Dataset, SlotConfig, SynthConfig};
    use crate::tensor::{finite_diff_check, GradCheckConfig};

    let synth = SynthConfig {
        num_users: 6,
        num_items: 8,
        num_behaviors: 2,
        num_slots: 2,
        granularity: 100,
        clusters: 2,
        seed,
        target_items_per_user: (2, 3),
        aux_volume_multiplier: (2, 3),
        within_cluster_prob: 0.8,
    };
    let (events, meta) = synth_generate(&synth).expect("minimal synthetic config is feasible");
    let ds = Dataset::prepare(meta, events, SlotConfig::new(100, 2)).expect("valid dataset");

    let cfg = RunConfig {
        embed_dim: 4,
        layers: 1,
        num_slots: 2,
        granularity: 100,
        ..RunConfig::default()
    };
    let dims = ModelDims::from_config(&cfg, ds.num_users(), ds.num_items(), ds.num_behaviors());
    let params = ModelParams::init(dims.clone(), cfg.zeta_init, seed);

    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let users: Vec<usize> = (0..6).collect();
    let (triples, _) = sample_triples(&ds, &users, ds.catalog.target(), 1, &mut rng);
    let batch = StepBatch {
        short_batches: StepBatch::short_batches_for(&ds, &users),
        users,
        triples,
        aux_triples: Vec::new(),
    };

    let check_cfg = GradCheckConfig { eps, tol, ..GradCheckConfig::default() };
    let report = finite_diff_check(
        |g, ids| {
            let nodes = ParamNodes::from_ids(ids.clone());
            build_total_loss(g, &dims, &nodes, &ds, &batch, &cfg).total
        },
        params.values(),
        &check_cfg,
    )?;
    Ok(report)
}
