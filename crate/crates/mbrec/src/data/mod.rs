//! Interaction logs: parsing, slot slicing, per-slot graph construction,
//! and a planted-cluster synthetic generator.
//!
//! The on-disk format is a CSV event log (`user,item,behavior,timestamp`,
//! header optional) plus a JSON sidecar declaring the universe sizes, the
//! behavior names, and which behavior is the prediction target.

mod slot_graph;
mod slots;
pub mod synth;

use std::collections::BTreeSet;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use slot_graph::{build_slot_graph, SlotGraph};
pub use slots::{slice_slots, slot_of, SlotBuckets, SlotConfig, SlotEdge};
pub use synth::{synth_generate, SynthConfig};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: {msg}")]
    MalformedLine { line: usize, msg: String },
    #[error("line {line}: {field} = {value} out of range (must be < {bound})")]
    OutOfRange { line: usize, field: &'static str, value: u64, bound: u64 },
    #[error("invalid catalog: {0}")]
    InvalidCatalog(String),
    #[error("infeasible synthetic config: {0}")]
    InfeasibleSynth(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// One observed (user, item, behavior, timestamp) record — the atom of all
/// input data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionEvent {
    pub user: usize,
    pub item: usize,
    pub behavior: usize,
    /// Seconds since epoch (or any fixed origin); only differences matter.
    pub timestamp: u64,
}

/// Behavior names plus which one is the prediction target; all the others
/// are auxiliary signal.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BehaviorCatalog {
    names: Vec<String>,
    target: usize,
}

impl BehaviorCatalog {
    pub fn new(names: Vec<String>, target: usize) -> Result<Self, DataError> {
        if names.is_empty() {
            return Err(DataError::InvalidCatalog("no behaviors".into()));
        }
        if target >= names.len() {
            return Err(DataError::InvalidCatalog(format!(
                "target index {target} out of {} behaviors",
                names.len()
            )));
        }
        let unique: BTreeSet<&str> = names.iter().map(|s| s.as_str()).collect();
        if unique.len() != names.len() {
            return Err(DataError::InvalidCatalog("duplicate behavior names".into()));
        }
        Ok(BehaviorCatalog { names, target })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn target(&self) -> usize {
        self.target
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, b: usize) -> &str {
        &self.names[b]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

/// The JSON sidecar accompanying an event log.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub num_users: usize,
    pub num_items: usize,
    pub behaviors: Vec<String>,
    pub target_behavior: usize,
}

impl DatasetMeta {
    pub fn catalog(&self) -> Result<BehaviorCatalog, DataError> {
        BehaviorCatalog::new(self.behaviors.clone(), self.target_behavior)
    }

    pub fn num_behaviors(&self) -> usize {
        self.behaviors.len()
    }
}

/// Parse a CSV event stream (`user,item,behavior,timestamp`). A header line
/// is skipped if its first field is not numeric. Events come back sorted by
/// (user, timestamp) with every id validated against the sidecar counts.
pub fn parse_events<R: BufRead>(reader: R, meta: &DatasetMeta) -> Result<Vec<InteractionEvent>, DataError> {
    let mut events = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if idx == 0 && !trimmed.chars().next().unwrap().is_ascii_digit() {
            continue; // header
        }
        let fields: Vec<&str> = trimmed.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(DataError::MalformedLine {
                line: line_no,
                msg: format!("expected 4 comma-separated fields, got {}", fields.len()),
            });
        }
        let parse = |s: &str, what: &str| -> Result<u64, DataError> {
            s.parse::<u64>().map_err(|_| DataError::MalformedLine {
                line: line_no,
                msg: format!("{what} `{s}` is not a nonnegative integer"),
            })
        };
        let user = parse(fields[0], "user")?;
        let item = parse(fields[1], "item")?;
        let behavior = parse(fields[2], "behavior")?;
        let timestamp = parse(fields[3], "timestamp")?;

        if user >= meta.num_users as u64 {
            return Err(DataError::OutOfRange { line: line_no, field: "user", value: user, bound: meta.num_users as u64 });
        }
        if item >= meta.num_items as u64 {
            return Err(DataError::OutOfRange { line: line_no, field: "item", value: item, bound: meta.num_items as u64 });
        }
        if behavior >= meta.behaviors.len() as u64 {
            return Err(DataError::OutOfRange {
                line: line_no,
                field: "behavior",
                value: behavior,
                bound: meta.behaviors.len() as u64,
            });
        }
        events.push(InteractionEvent {
            user: user as usize,
            item: item as usize,
            behavior: behavior as usize,
            timestamp,
        });
    }
    events.sort_by_key(|e| (e.user, e.timestamp));
    Ok(events)
}

pub fn write_events_csv<W: Write>(mut w: W, events: &[InteractionEvent]) -> Result<(), DataError> {
    writeln!(w, "user,item,behavior,timestamp")?;
    for e in events {
        writeln!(w, "{},{},{},{}", e.user, e.item, e.behavior, e.timestamp)?;
    }
    Ok(())
}

/// Event log sliced, graphed, and indexed — everything the trainer and
/// evaluator read. Construction is the only mutation; afterwards the
/// structure is shared read-only.
#[derive(Debug)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub catalog: BehaviorCatalog,
    pub slot_cfg: SlotConfig,
    pub events: Vec<InteractionEvent>,
    /// Per-slot per-behavior interaction graphs, indexed `graphs[t][b]`.
    pub graphs: Vec<Vec<SlotGraph>>,
    /// Items each user touched under the target behavior (sorted).
    pub user_target_items: Vec<Vec<usize>>,
    /// Items each user touched under any behavior (sorted).
    pub user_any_items: Vec<Vec<usize>>,
    /// Items each user touched per behavior, indexed `[b][u]` (sorted).
    pub user_items_by_behavior: Vec<Vec<Vec<usize>>>,
    /// Total event count per user (for sparsity buckets).
    pub user_event_counts: Vec<usize>,
}

impl Dataset {
    pub fn prepare(
        meta: DatasetMeta,
        events: Vec<InteractionEvent>,
        slot_cfg: SlotConfig,
    ) -> Result<Self, DataError> {
        let catalog = meta.catalog()?;
        let buckets = slice_slots(&events, &slot_cfg, catalog.len());
        let mut graphs = Vec::with_capacity(slot_cfg.num_slots);
        for t in 0..slot_cfg.num_slots {
            let mut per_b = Vec::with_capacity(catalog.len());
            for b in 0..catalog.len() {
                per_b.push(build_slot_graph(t, b, buckets.edges(t, b), meta.num_users, meta.num_items));
            }
            graphs.push(per_b);
        }

        let mut by_behavior: Vec<Vec<BTreeSet<usize>>> =
            vec![vec![BTreeSet::new(); meta.num_users]; catalog.len()];
        let mut any: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); meta.num_users];
        let mut user_event_counts = vec![0usize; meta.num_users];
        for e in &events {
            by_behavior[e.behavior][e.user].insert(e.item);
            any[e.user].insert(e.item);
            user_event_counts[e.user] += 1;
        }
        let to_sorted = |sets: Vec<BTreeSet<usize>>| -> Vec<Vec<usize>> {
            sets.into_iter().map(|s| s.into_iter().collect()).collect()
        };
        let user_items_by_behavior: Vec<Vec<Vec<usize>>> = by_behavior.into_iter().map(to_sorted).collect();
        let user_target_items = user_items_by_behavior[catalog.target()].clone();
        let user_any_items = to_sorted(any);

        Ok(Dataset {
            meta,
            catalog,
            slot_cfg,
            events,
            graphs,
            user_target_items,
            user_any_items,
            user_items_by_behavior,
            user_event_counts,
        })
    }

    pub fn num_users(&self) -> usize {
        self.meta.num_users
    }

    pub fn num_items(&self) -> usize {
        self.meta.num_items
    }

    pub fn num_behaviors(&self) -> usize {
        self.catalog.len()
    }

    pub fn num_slots(&self) -> usize {
        self.slot_cfg.num_slots
    }

    /// Drop every event of the given behavior and rebuild with a shrunken
    /// catalog. Dropping the target behavior is refused.
    pub fn drop_behavior(&self, b: usize) -> Result<Dataset, DataError> {
        if b >= self.catalog.len() {
            return Err(DataError::InvalidCatalog(format!(
                "behavior {b} does not exist ({} behaviors)",
                self.catalog.len()
            )));
        }
        if b == self.catalog.target() {
            return Err(DataError::InvalidCatalog("cannot drop the target behavior".into()));
        }
        let mut names = self.catalog.names().to_vec();
        names.remove(b);
        let new_target = if self.catalog.target() > b { self.catalog.target() - 1 } else { self.catalog.target() };
        let events: Vec<InteractionEvent> = self
            .events
            .iter()
            .filter(|e| e.behavior != b)
            .map(|e| InteractionEvent {
                behavior: if e.behavior > b { e.behavior - 1 } else { e.behavior },
                ..*e
            })
            .collect();
        let meta = DatasetMeta {
            num_users: self.meta.num_users,
            num_items: self.meta.num_items,
            behaviors: names,
            target_behavior: new_target,
        };
        Dataset::prepare(meta, events, self.slot_cfg.clone())
    }

    /// Keep only the target behavior.
    pub fn target_only(&self) -> Result<Dataset, DataError> {
        let mut ds = Dataset::prepare(
            DatasetMeta {
                num_users: self.meta.num_users,
                num_items: self.meta.num_items,
                behaviors: vec![self.catalog.name(self.catalog.target()).to_string()],
                target_behavior: 0,
            },
            self.events
                .iter()
                .filter(|e| e.behavior == self.catalog.target())
                .map(|e| InteractionEvent { behavior: 0, ..*e })
                .collect(),
            self.slot_cfg.clone(),
        )?;
        ds.meta.target_behavior = 0;
        Ok(ds)
    }
}
