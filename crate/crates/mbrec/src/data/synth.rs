//! Planted-cluster synthetic interaction logs.
//!
//! Users and items are assigned round-robin to latent clusters; target
//! interactions land inside the user's own cluster with high probability,
//! and each auxiliary behavior covers a strict superset of the user's
//! target items at several times the volume. That mirrors the shape of
//! real multi-behavior logs (heavy view traffic over sparse purchases)
//! while giving a trainable signal at desk scale.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DataError, DatasetMeta, InteractionEvent};

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub num_users: usize,
    pub num_items: usize,
    pub num_behaviors: usize,
    pub num_slots: usize,
    pub granularity: u64,
    /// Planted cluster count; must not exceed min(users, items).
    pub clusters: usize,
    pub seed: u64,
    /// Distinct target items sampled per user (inclusive range).
    pub target_items_per_user: (usize, usize),
    /// Auxiliary behavior volume as a multiple of target volume (inclusive).
    pub aux_volume_multiplier: (usize, usize),
    /// Probability that a sampled item comes from the user's own cluster.
    pub within_cluster_prob: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_users: 200,
            num_items: 100,
            num_behaviors: 4,
            num_slots: 3,
            granularity: 86_400,
            clusters: 4,
            seed: 42,
            target_items_per_user: (2, 2),
            aux_volume_multiplier: (6, 10),
            within_cluster_prob: 0.9,
        }
    }
}

impl SynthConfig {
    fn behavior_names(&self) -> Vec<String> {
        let aux_pool = ["view", "favorite", "cart", "review", "browse", "tag", "share"];
        let mut names: Vec<String> = (0..self.num_behaviors - 1)
            .map(|i| {
                if i < aux_pool.len() {
                    aux_pool[i].to_string()
                } else {
                    format!("aux{i}")
                }
            })
            .collect();
        names.push("purchase".to_string());
        names
    }

    pub fn meta(&self) -> DatasetMeta {
        DatasetMeta {
            num_users: self.num_users,
            num_items: self.num_items,
            behaviors: self.behavior_names(),
            target_behavior: self.num_behaviors - 1,
        }
    }
}

/// Cluster id of a user or item under round-robin assignment.
pub fn cluster_of(id: usize, clusters: usize) -> usize {
    id % clusters
}

/// Generate a deterministic event log. Every user gets at least two target
/// events, so leave-one-out evaluation is always well defined.
pub fn synth_generate(cfg: &SynthConfig) -> Result<(Vec<InteractionEvent>, DatasetMeta), DataError> {
    if cfg.num_users == 0 || cfg.num_behaviors == 0 || cfg.num_slots == 0 || cfg.granularity == 0 {
        return Err(DataError::InfeasibleSynth("all counts must be positive".into()));
    }
    if cfg.clusters == 0 || cfg.clusters > cfg.num_users.min(cfg.num_items) {
        return Err(DataError::InfeasibleSynth(format!(
            "clusters = {} must lie in [1, min(users, items) = {}]",
            cfg.clusters,
            cfg.num_users.min(cfg.num_items)
        )));
    }
    let (lo, hi) = cfg.target_items_per_user;
    if lo < 2 || hi < lo {
        return Err(DataError::InfeasibleSynth(
            "target_items_per_user must be an increasing range starting at ≥ 2".into(),
        ));
    }
    if cfg.num_items < hi {
        return Err(DataError::InfeasibleSynth(format!(
            "{} items cannot host {hi} distinct target interactions per user",
            cfg.num_items
        )));
    }
    if !(0.0..=1.0).contains(&cfg.within_cluster_prob) {
        return Err(DataError::InfeasibleSynth("within_cluster_prob must be in [0,1]".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let horizon = cfg.granularity * cfg.num_slots as u64;

    // items grouped by cluster for biased sampling
    let mut items_by_cluster: Vec<Vec<usize>> = vec![Vec::new(); cfg.clusters];
    for i in 0..cfg.num_items {
        items_by_cluster[cluster_of(i, cfg.clusters)].push(i);
    }

    let sample_item = |rng: &mut ChaCha8Rng, own: usize| -> usize {
        let within = cfg.clusters == 1 || rng.gen_bool(cfg.within_cluster_prob);
        if within {
            *items_by_cluster[own].choose(rng).expect("non-empty cluster")
        } else {
            loop {
                let i = rng.gen_range(0..cfg.num_items);
                if cluster_of(i, cfg.clusters) != own {
                    return i;
                }
            }
        }
    };

    let target_b = cfg.num_behaviors - 1;
    let mut events = Vec::new();
    for u in 0..cfg.num_users {
        let own = cluster_of(u, cfg.clusters);
        let n_target = rng.gen_range(lo..=hi);

        // distinct target items, cluster-biased
        let mut target_items: Vec<usize> = Vec::with_capacity(n_target);
        let mut guard = 0;
        while target_items.len() < n_target {
            let i = sample_item(&mut rng, own);
            if !target_items.contains(&i) {
                target_items.push(i);
            }
            guard += 1;
            if guard > 10_000 {
                return Err(DataError::InfeasibleSynth(format!(
                    "could not sample {n_target} distinct target items for user {u}"
                )));
            }
        }
        for &i in &target_items {
            events.push(InteractionEvent {
                user: u,
                item: i,
                behavior: target_b,
                timestamp: rng.gen_range(0..horizon),
            });
        }

        for b in 0..target_b {
            let mult = rng.gen_range(cfg.aux_volume_multiplier.0..=cfg.aux_volume_multiplier.1);
            // superset: every target item also appears under the auxiliary behavior
            for &i in &target_items {
                events.push(InteractionEvent {
                    user: u,
                    item: i,
                    behavior: b,
                    timestamp: rng.gen_range(0..horizon),
                });
            }
            let extra = n_target * mult - n_target;
            for _ in 0..extra {
                events.push(InteractionEvent {
                    user: u,
                    item: sample_item(&mut rng, own),
                    behavior: b,
                    timestamp: rng.gen_range(0..horizon),
                });
            }
        }
    }

    events.sort_by_key(|e| (e.user, e.timestamp, e.behavior, e.item));
    Ok((events, cfg.meta()))
}
