//! Slicing an event log into per-(slot, behavior) edge lists.

use serde::{Deserialize, Serialize};

use super::InteractionEvent;

/// Time discretization: `num_slots` windows of `granularity` seconds each.
/// Events past the horizon are clipped into the last slot so that real logs
/// with stragglers stay usable.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotConfig {
    pub granularity: u64,
    pub num_slots: usize,
}

impl SlotConfig {
    pub fn new(granularity: u64, num_slots: usize) -> Self {
        assert!(granularity > 0, "granularity must be positive");
        assert!(num_slots > 0, "need at least one slot");
        SlotConfig { granularity, num_slots }
    }

    pub fn horizon(&self) -> u64 {
        self.granularity * self.num_slots as u64
    }
}

/// Which slot an event falls into, plus its offset from the slot start.
/// Clipped events keep their true offset, which may exceed the granularity.
pub fn slot_of(timestamp: u64, cfg: &SlotConfig) -> (usize, u64) {
    let raw = (timestamp / cfg.granularity) as usize;
    let slot = raw.min(cfg.num_slots - 1);
    let dt = timestamp - slot as u64 * cfg.granularity;
    (slot, dt)
}

/// One user-item edge inside a slot, with the offset of its earliest
/// occurrence from the slot start.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SlotEdge {
    pub user: usize,
    pub item: usize,
    pub dt: u64,
}

/// Edge lists per (slot, behavior). Duplicate (user, item) interactions
/// within one bucket collapse to a single 0/1 edge keeping the earliest
/// offset — degree counts are defined on incidence, not multiplicity.
#[derive(Debug)]
pub struct SlotBuckets {
    num_slots: usize,
    num_behaviors: usize,
    edges: Vec<Vec<SlotEdge>>,
}

impl SlotBuckets {
    pub fn edges(&self, t: usize, b: usize) -> &[SlotEdge] {
        &self.edges[t * self.num_behaviors + b]
    }

    pub fn num_slots(&self) -> usize {
        self.num_slots
    }

    pub fn num_behaviors(&self) -> usize {
        self.num_behaviors
    }

    pub fn total_edges(&self) -> usize {
        self.edges.iter().map(Vec::len).sum()
    }
}

pub fn slice_slots(events: &[InteractionEvent], cfg: &SlotConfig, num_behaviors: usize) -> SlotBuckets {
    let mut edges: Vec<Vec<SlotEdge>> = vec![Vec::new(); cfg.num_slots * num_behaviors];
    for e in events {
        let (t, dt) = slot_of(e.timestamp, cfg);
        edges[t * num_behaviors + e.behavior].push(SlotEdge { user: e.user, item: e.item, dt });
    }
    for bucket in &mut edges {
        // keep the earliest occurrence of each (user, item)
        bucket.sort_by_key(|e| (e.user, e.item, e.dt));
        bucket.dedup_by_key(|e| (e.user, e.item));
    }
    SlotBuckets { num_slots: cfg.num_slots, num_behaviors, edges }
}
