//! Ablation variants: disable the contrastive terms, swap the graph
//! encoder for raw id embeddings, or drop behaviors from the data.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::config::RunConfig;
use crate::data::{DataError, Dataset, DatasetMeta, InteractionEvent, SlotConfig};
use crate::model::{final_embeddings, ModelDims};
use crate::train::{train_with_dims, EpochRecord, TrainError};

use super::{evaluate_embeddings, make_split, EvalError, MetricReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationVariant {
    /// The complete model.
    Full,
    /// Contrastive weights zeroed; everything else unchanged.
    WoCl,
    /// Contrastive weights zeroed and the graph encoder replaced with
    /// per-behavior learnable id embeddings (no message passing).
    WoMbg,
    /// Remove one auxiliary behavior's events before training.
    DropBehavior(usize),
    /// Keep only the target behavior.
    TargetOnly,
}

impl fmt::Display for AblationVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AblationVariant::Full => write!(f, "full"),
            AblationVariant::WoCl => write!(f, "wo_cl"),
            AblationVariant::WoMbg => write!(f, "wo_mbg"),
            AblationVariant::DropBehavior(b) => write!(f, "drop_behavior:{b}"),
            AblationVariant::TargetOnly => write!(f, "target_only"),
        }
    }
}

impl FromStr for AblationVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => Ok(AblationVariant::Full),
            "wo_cl" => Ok(AblationVariant::WoCl),
            "wo_mbg" => Ok(AblationVariant::WoMbg),
            "target_only" => Ok(AblationVariant::TargetOnly),
            other => {
                if let Some(rest) = other.strip_prefix("drop_behavior:") {
                    rest.parse::<usize>()
                        .map(AblationVariant::DropBehavior)
                        .map_err(|_| format!("bad behavior index in `{other}`"))
                } else {
                    Err(format!(
                        "unknown variant `{other}` (expected full | wo_cl | wo_mbg | drop_behavior:<b> | target_only)"
                    ))
                }
            }
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum AblationError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Debug, Serialize)]
pub struct AblationOutcome {
    pub variant: String,
    pub report: MetricReport,
    #[serde(skip)]
    pub epochs: Vec<EpochRecord>,
}

/// Train one variant end to end (split, train, evaluate) on the given raw
/// event log. The split seed comes from the run config, so all variants
/// hold out the same target interactions.
pub fn run_ablation(
    variant: AblationVariant,
    events: &[InteractionEvent],
    meta: &DatasetMeta,
    cfg: &RunConfig,
) -> Result<AblationOutcome, AblationError> {
    let slot_cfg = SlotConfig::new(cfg.granularity, cfg.num_slots);
    let base = Dataset::prepare(meta.clone(), events.to_vec(), slot_cfg.clone())?;

    // variant-specific data
    let data = match variant {
        AblationVariant::DropBehavior(b) => base.drop_behavior(b)?,
        AblationVariant::TargetOnly => base.target_only()?,
        _ => base,
    };

    // variant-specific config
    let mut run_cfg = cfg.clone();
    match variant {
        AblationVariant::WoCl | AblationVariant::WoMbg => {
            run_cfg.alpha = 0.0;
            run_cfg.beta = 0.0;
        }
        _ => {}
    }

    let (train_events, split) = make_split(
        &data.events,
        &data.catalog,
        data.num_users(),
        data.num_items(),
        run_cfg.eval_negatives,
        run_cfg.negatives_exclude_all_behaviors,
        run_cfg.seed,
    );
    let train_ds = Dataset::prepare(data.meta.clone(), train_events, slot_cfg)?;

    let mut dims =
        ModelDims::from_config(&run_cfg, train_ds.num_users(), train_ds.num_items(), train_ds.num_behaviors());
    if variant == AblationVariant::WoMbg {
        dims.id_embeddings_only = true;
    }

    let outcome = train_with_dims(&train_ds, &run_cfg, dims, Some(&split))?;
    let (user_emb, item_emb) = final_embeddings(&outcome.params, &train_ds);
    let report = evaluate_embeddings(
        &user_emb,
        &item_emb,
        &split,
        &run_cfg.eval_topk,
        &train_ds.user_event_counts,
        run_cfg.threads,
    )?;

    Ok(AblationOutcome { variant: variant.to_string(), report, epochs: outcome.epochs })
}

/// Side-by-side comparison table (one CSV row per variant), with the final
/// epoch's loss components appended. Disabled contrastive terms show as
/// exactly zero.
pub fn comparison_csv(outcomes: &[AblationOutcome]) -> String {
    let mut out = String::new();
    if let Some(first) = outcomes.first() {
        out.push_str(&format!("variant,{},bpr,cl_long,cl_short\n", first.report.csv_header()));
    }
    for o in outcomes {
        let (bpr, cl_long, cl_short) = o
            .epochs
            .last()
            .map(|r| (r.bpr, r.cl_long, r.cl_short))
            .unwrap_or((0.0, 0.0, 0.0));
        out.push_str(&format!(
            "{},{},{bpr:.6},{cl_long:.6},{cl_short:.6}\n",
            o.variant,
            o.report.csv_row()
        ));
    }
    out
}
