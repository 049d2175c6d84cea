//! Distance-ordered out-of-order query scheduling.
//!
//! Greedy L1 nearest-neighbour ordering inside a sliding lookup window of
//! `w_d` candidates, with a cyclic bitonic sorter cost model. Emitting a
//! query reveals the next one a full step early, which is what drives the
//! region prefetch in the cache model.

use serde::{Deserialize, Serialize};

use crate::attention::QueryBatch;

/// Deterministic tie-break rule applied when two candidates are equidistant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieBreak {
    /// Prefer the candidate with the lowest original id.
    #[default]
    LowestId,
}

/// Scheduler parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchedulerConfig {
    /// Lookup window size `w_d` (candidates visible at once), >= 1.
    pub window: usize,
    /// Datapath parallelism `p_d` (elements per cycle), >= 1.
    pub parallelism: usize,
    /// Channel count `D` of the workload.
    pub channels: usize,
    /// Tie-break rule.
    pub tie_break: TieBreak,
}

impl SchedulerConfig {
    pub fn new(window: usize, parallelism: usize, channels: usize) -> Self {
        Self { window: window.max(1), parallelism: parallelism.max(1), channels, tie_break: TieBreak::LowestId }
    }

    /// Per-query slack available to the sorter: `ceil(D / p_d)` cycles.
    pub fn slack_cycles(&self) -> usize {
        self.channels.div_ceil(self.parallelism)
    }
}

/// Cost of one cyclic-bitonic selection pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SorterCost {
    /// Compare-exchange stage count: `s(s+1)/2` with `s = ceil(log2(occupancy))`.
    pub stages: usize,
    /// Time-multiplexed compare-and-swap units: `ceil(occupancy / 2)`.
    pub comparators: usize,
    /// Whether the stages fit inside the per-query `ceil(D/p_d)` slack.
    pub fits_in_slack: bool,
}

/// Bitonic network cost for sorting `occupancy` candidates.
pub fn sorter_cost(occupancy: usize, config: &SchedulerConfig) -> SorterCost {
    // s = ceil(log2(occupancy)), exact in integer arithmetic
    let s = if occupancy <= 1 { 0 } else { occupancy.next_power_of_two().trailing_zeros() as usize };
    let stages = s * (s + 1) / 2;
    SorterCost {
        stages,
        comparators: occupancy.div_ceil(2),
        fits_in_slack: stages <= config.slack_cycles(),
    }
}

/// Execution order plus the one-step look-ahead it guarantees.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    /// `order[i]` is the query index executed at step `i` (a permutation).
    pub order: Vec<usize>,
    /// `lookahead[i] == Some(order[i+1])` for `i < n-1`, `None` at the tail.
    pub lookahead: Vec<Option<usize>>,
    /// Selection cost at each step.
    pub sorter_stats: Vec<SorterCost>,
}

impl Schedule {
    /// True when `order` is a bijection on `0..n`.
    pub fn is_permutation(&self) -> bool {
        let mut seen = vec![false; self.order.len()];
        for &q in &self.order {
            if q >= seen.len() || seen[q] {
                return false;
            }
            seen[q] = true;
        }
        true
    }
}

/// L1 distance between two normalized reference points.
pub fn l1_distance(p: [f32; 2], q: [f32; 2]) -> f32 {
    (p[0] - q[0]).abs() + (p[1] - q[1]).abs()
}

/// Greedy windowed nearest-neighbour ordering.
///
/// The window starts with the first `w_d` queries in original order; the
/// first emitted query is the original first query. Each step emits the
/// window's L1-nearest candidate to the current query (ties to the lowest
/// original id), refills the window with the next un-windowed query in
/// original order, and chains from the emitted query. With `w_d = 1` the
/// result is the identity order.
pub fn dooq_schedule(queries: &QueryBatch, config: &SchedulerConfig) -> Schedule {
    let n = queries.len();
    let mut order = Vec::with_capacity(n);
    let mut sorter_stats = Vec::with_capacity(n);
    if n == 0 {
        return Schedule { order, lookahead: vec![], sorter_stats };
    }

    let mut window: Vec<usize> = (0..n.min(config.window)).collect();
    let mut next_feed = window.len();

    // seed: the original first query
    let mut current = window[0];
    window.remove(0);
    if next_feed < n {
        window.push(next_feed);
        next_feed += 1;
    }
    order.push(current);
    sorter_stats.push(sorter_cost(1, config));

    while !window.is_empty() {
        let here = queries.ref_point(current);
        let occupancy = window.len();
        let mut best = 0usize;
        let mut best_dist = f32::INFINITY;
        for (slot, &cand) in window.iter().enumerate() {
            let d = l1_distance(here, queries.ref_point(cand));
            let closer = d < best_dist
                || (d == best_dist && queries.id(cand) < queries.id(window[best]));
            if closer {
                best = slot;
                best_dist = d;
            }
        }
        current = window.remove(best);
        if next_feed < n {
            window.push(next_feed);
            next_feed += 1;
        }
        order.push(current);
        sorter_stats.push(sorter_cost(occupancy, config));
    }

    let lookahead = (0..n).map(|i| order.get(i + 1).copied()).collect();
    Schedule { order, lookahead, sorter_stats }
}
