//! One resolved configuration document for every run.
//!
//! Configs load from JSON (unknown keys rejected), CLI flags override file
//! values, and each run logs the fully resolved document plus a stable hash
//! so results are replayable.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrSchedule {
    Fixed,
    /// Triangle wave between `base` and `max` with the given period in epochs.
    CyclicalTriangular { base: f64, max: f64, period: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    // model shape
    pub embed_dim: usize,
    pub layers: usize,
    pub num_slots: usize,
    pub granularity: u64,
    pub heads: usize,
    pub zeta_init: f64,
    pub tie_weights_across_slots: bool,
    pub temporal_injection: bool,

    // contrastive objectives
    pub tau: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Add a symmetric item-side term to the long-horizon contrastive loss
    /// (batch = the step's ranking items).
    pub item_contrast: bool,

    // optimization
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
    pub l2_lambda: f64,
    pub weight_decay: f64,
    pub grad_clip_norm: f64,
    pub negatives_per_positive: usize,
    pub bpr_all_behaviors: bool,
    /// Hard-skip the contrastive terms entirely (reference ranking-only path).
    pub bpr_only: bool,
    pub seed: u64,

    // evaluation
    pub eval_topk: Vec<usize>,
    pub eval_negatives: usize,
    pub negatives_exclude_all_behaviors: bool,
    /// Run ranking metrics every this many epochs during training (0 = only
    /// at the end).
    pub eval_every: usize,
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            embed_dim: 32,
            layers: 2,
            num_slots: 3,
            granularity: 86_400,
            heads: 1,
            zeta_init: 0.5,
            tie_weights_across_slots: true,
            temporal_injection: true,
            tau: 0.1,
            alpha: 0.1,
            beta: 0.1,
            item_contrast: false,
            epochs: 50,
            batch_size: 64,
            learning_rate: 1e-2,
            lr_schedule: LrSchedule::Fixed,
            l2_lambda: 1e-4,
            weight_decay: 0.0,
            grad_clip_norm: 5.0,
            negatives_per_positive: 1,
            bpr_all_behaviors: false,
            bpr_only: false,
            seed: 42,
            eval_topk: vec![5, 10, 20],
            eval_negatives: 99,
            negatives_exclude_all_behaviors: true,
            eval_every: 1,
            threads: 1,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |msg: String| Err(ConfigError::Invalid(msg));
        if self.embed_dim == 0 {
            return fail("embed_dim must be positive".into());
        }
        if self.temporal_injection && !self.embed_dim.is_multiple_of(2) {
            return fail("embed_dim must be even when temporal_injection is on".into());
        }
        if !(1..=4).contains(&self.layers) {
            return fail(format!("layers = {} outside {{1,2,3,4}}", self.layers));
        }
        if self.num_slots == 0 || self.granularity == 0 {
            return fail("num_slots and granularity must be positive".into());
        }
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return fail(format!("heads = {} must divide embed_dim = {}", self.heads, self.embed_dim));
        }
        if !(0.0..=1.0).contains(&self.zeta_init) {
            return fail("zeta_init must lie in [0, 1]".into());
        }
        if self.tau <= 0.0 {
            return fail("tau must be positive".into());
        }
        if self.alpha < 0.0 || self.beta < 0.0 {
            return fail("alpha and beta must be nonnegative".into());
        }
        if self.batch_size < 2 {
            return fail("batch_size must be at least 2".into());
        }
        if self.learning_rate <= 0.0 {
            return fail("learning_rate must be positive".into());
        }
        if let LrSchedule::CyclicalTriangular { base, max, period } = &self.lr_schedule {
            if *base <= 0.0 || *max < *base || *period == 0 {
                return fail("cyclical schedule needs 0 < base <= max and period >= 1".into());
            }
        }
        if self.l2_lambda < 0.0 || self.weight_decay < 0.0 {
            return fail("regularization strengths must be nonnegative".into());
        }
        if self.grad_clip_norm <= 0.0 {
            return fail("grad_clip_norm must be positive".into());
        }
        if self.negatives_per_positive == 0 {
            return fail("negatives_per_positive must be at least 1".into());
        }
        if self.eval_topk.is_empty() {
            return fail("eval_topk must list at least one cutoff".into());
        }
        if self.eval_negatives == 0 {
            return fail("eval_negatives must be at least 1".into());
        }
        if self.threads == 0 {
            return fail("threads must be at least 1".into());
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// FNV-1a hash of the canonical JSON encoding; stored in checkpoints so
    /// a report can be traced back to the exact configuration.
    pub fn stable_hash(&self) -> u64 {
        let text = serde_json::to_string(self).expect("config serializes");
        let mut h: u64 = 0xcbf29ce484222325;
        for byte in text.as_bytes() {
            h ^= *byte as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_validates() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_json(r#"{"embed_dim": 8, "no_such_key": 1}"#);
        assert!(err.is_err());
    }

    #[test]
    fn partial_json_fills_defaults() {
        let cfg = RunConfig::from_json(r#"{"embed_dim": 8, "tau": 0.5}"#).unwrap();
        assert_eq!(cfg.embed_dim, 8);
        assert_eq!(cfg.tau, 0.5);
        assert_eq!(cfg.layers, RunConfig::default().layers);
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig { tau: 0.0, ..Default::default() }.validate().is_err());
        assert!(RunConfig { heads: 3, embed_dim: 32, ..Default::default() }.validate().is_err());
        assert!(RunConfig { layers: 5, ..Default::default() }.validate().is_err());
        assert!(RunConfig { embed_dim: 7, temporal_injection: true, ..Default::default() }
            .validate()
            .is_err());
    }

    #[test]
    fn hash_is_stable_and_value_sensitive() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        assert_eq!(a.stable_hash(), b.stable_hash());
        b.seed = 43;
        assert_ne!(a.stable_hash(), b.stable_hash());
    }
}
