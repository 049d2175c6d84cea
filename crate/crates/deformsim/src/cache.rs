//! Trace-driven cache, region-prefetch, stall and energy model.
//!
//! A cache line is one `(level, y, x)` spatial location's full `D`-channel
//! vector, which matches the 2x2 interpolation footprint. Footprints keep all
//! four taps of each sample's 2x2 block (the datapath fetches the block
//! unconditionally), excluding only taps outside the map, consistent with the
//! kernels' zero-padding.
//!
//! Two policies are simulated against each other at equal capacity:
//!
//! - a direct-mapped baseline (`index = flat_line_address mod capacity`),
//!   where every miss stalls for a full line fetch;
//! - a ping-pong region prefetcher, where the region around the next query in
//!   the schedule is fetched into the alternate buffer while the current
//!   query computes.
//!
//! Ping-pong accounting: the lines resident when a step's prefetch begins are
//! exactly the previous step's region, so the incremental fetch for step `i`
//! is `region[i] \ region[i-1]` - the same set difference the analytic stall
//! formula charges. An access to a carried line (already resident before the
//! prefetch) counts as a hit; an access to a freshly prefetched line counts
//! as a miss whose latency is overlapped with compute; an access outside the
//! region takes the victim path at full per-line latency without polluting
//! the buffers. The cold-start fetch of step 0 is reported separately from
//! `stall_cycles` and included in `total_cycles`.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::attention::{PyramidDims, QueryBatch};
use crate::{Error, Result};

// ── Types ───────────────────────────────────────────────────────────

/// One cache line: a spatial location on one pyramid level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LineId {
    pub level: usize,
    pub y: usize,
    pub x: usize,
}

impl LineId {
    /// Flat line address: levels concatenated in order, row-major inside.
    pub fn flat(&self, dims: &PyramidDims) -> usize {
        let (_, w) = dims.levels[self.level];
        dims.line_base(self.level) + self.y * w + self.x
    }
}

/// A deduplicated set of lines, kept in first-touch order so replay is
/// deterministic.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Footprint {
    lines: Vec<LineId>,
}

impl Footprint {
    pub fn new() -> Self {
        Self { lines: Vec::new() }
    }

    pub fn from_lines(lines: Vec<LineId>) -> Self {
        let mut fp = Self::new();
        let mut seen = HashSet::with_capacity(lines.len());
        for line in lines {
            if seen.insert(line) {
                fp.lines.push(line);
            }
        }
        fp
    }

    pub fn push_unique(&mut self, line: LineId, seen: &mut HashSet<LineId>) {
        if seen.insert(line) {
            self.lines.push(line);
        }
    }

    pub fn len(&self) -> usize {
        self.lines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lines.is_empty()
    }

    pub fn lines(&self) -> &[LineId] {
        &self.lines
    }

    pub fn as_set(&self) -> HashSet<LineId> {
        self.lines.iter().copied().collect()
    }
}

/// Cache replacement/organization policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CachePolicy {
    DirectMapped,
    DooqPingpong,
}

/// Cache organization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CacheGeometry {
    pub policy: CachePolicy,
    /// Total capacity in lines; the ping-pong policy splits it into two
    /// equal region buffers.
    pub capacity_lines: usize,
    /// Bank count for the conflict diagnostic.
    pub banks: usize,
    /// Bytes per line (`D * bytes_per_element`).
    pub bytes_per_line: usize,
}

impl CacheGeometry {
    pub fn new(policy: CachePolicy, capacity_lines: usize, banks: usize, bytes_per_line: usize) -> Result<Self> {
        if capacity_lines == 0 || banks == 0 || bytes_per_line == 0 {
            return Err(Error::Config("cache geometry fields must be positive".into()));
        }
        Ok(Self { policy, capacity_lines, banks, bytes_per_line })
    }

    /// Lines available to one ping-pong buffer.
    pub fn buffer_lines(&self) -> usize {
        self.capacity_lines / 2
    }
}

/// Default external-memory energy cost per transferred bit (HBM2-class), pJ.
pub const DEFAULT_ENERGY_PER_BIT_PJ: f64 = 1.21;

/// Timing and energy parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingConfig {
    /// Cycles to fetch one line from external memory.
    pub t_fetch_per_line: u64,
    /// Compute cycles per query.
    pub t_comp_per_query: u64,
    /// External-transfer energy per bit, pJ.
    pub energy_per_bit_pj: f64,
}

impl TimingConfig {
    pub fn new(t_fetch_per_line: u64, t_comp_per_query: u64, energy_per_bit_pj: f64) -> Result<Self> {
        if t_fetch_per_line == 0 || energy_per_bit_pj <= 0.0 {
            return Err(Error::Config("timing parameters must be positive".into()));
        }
        Ok(Self { t_fetch_per_line, t_comp_per_query, energy_per_bit_pj })
    }

    /// Default per-query compute time: `L*K*ceil(D/p_d)` cycles (one 2x2
    /// sample group per `D/p_d` slice).
    pub fn default_compute_cycles(levels: usize, points: usize, channels: usize, parallelism: usize) -> u64 {
        (levels * points * channels.div_ceil(parallelism.max(1))) as u64
    }
}

/// Counters produced by one simulation run.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SimReport {
    pub accesses: u64,
    pub hits: u64,
    pub misses: u64,
    /// Per-access hit rate `hits / accesses`.
    pub hit_rate: f64,
    /// Lines fetched from external memory (demand + prefetch + cold start).
    pub fetched_lines: u64,
    /// Exposed stall cycles, excluding the cold-start fetch.
    pub stall_cycles: u64,
    /// Fetch cycles hidden under compute.
    pub covered_cycles: u64,
    /// Cold-start fetch cycles (first region, nothing to overlap with).
    pub cold_start_cycles: u64,
    /// `sum(t_comp) + stall_cycles + cold_start_cycles`.
    pub total_cycles: u64,
    /// `fetched_lines * bytes_per_line * 8 * energy_per_bit_pj`.
    pub energy_pj: f64,
    /// Mean over steps of the fraction of the step's region already resident.
    pub regional_reuse: f64,
    /// Largest number of lines held by one buffer at any step.
    pub peak_buffer_lines: u64,
}

impl SimReport {
    fn finish(mut self, geometry: &CacheGeometry, timing: &TimingConfig) -> Self {
        self.hit_rate = if self.accesses == 0 { 0.0 } else { self.hits as f64 / self.accesses as f64 };
        self.energy_pj =
            (self.fetched_lines * geometry.bytes_per_line as u64 * 8) as f64 * timing.energy_per_bit_pj;
        self
    }
}

// ── Footprints ──────────────────────────────────────────────────────

/// In-range taps of one sample's 2x2 block at fractional pixel `(x, y)`.
fn tap_block(level: usize, x: f64, y: f64, height: usize, width: usize, out: &mut Vec<LineId>) {
    let x0 = x.floor() as i64;
    let y0 = y.floor() as i64;
    for (dy, dx) in [(0i64, 0i64), (0, 1), (1, 0), (1, 1)] {
        let (tx, ty) = (x0 + dx, y0 + dy);
        if tx >= 0 && ty >= 0 && (tx as usize) < width && (ty as usize) < height {
            out.push(LineId { level, y: ty as usize, x: tx as usize });
        }
    }
}

/// Cache lines touched by one query: the union over its `M*L*K` samples of
/// each sample's in-range 2x2 tap block.
pub fn footprint(queries: &QueryBatch, q: usize, dims: &PyramidDims) -> Footprint {
    let mut fp = Footprint::new();
    let mut seen = HashSet::new();
    let mut taps = Vec::with_capacity(4);
    for m in 0..queries.heads() {
        for (l, &(h, w)) in dims.levels.iter().enumerate() {
            for k in 0..queries.points() {
                let (x, y) = crate::attention::sample_position(queries.ref_point(q), queries.offset(q, m, l, k), h, w);
                taps.clear();
                tap_block(l, x, y, h, w, &mut taps);
                for &line in &taps {
                    fp.push_unique(line, &mut seen);
                }
            }
        }
    }
    fp
}

/// Footprints for every query in the batch, indexed by query position.
pub fn footprints(queries: &QueryBatch, dims: &PyramidDims) -> Vec<Footprint> {
    (0..queries.len()).map(|q| footprint(queries, q, dims)).collect()
}

/// Per-sample tap groups of one query (for the bank-conflict diagnostic).
pub fn query_tap_groups(queries: &QueryBatch, q: usize, dims: &PyramidDims) -> Vec<Vec<LineId>> {
    let mut groups = Vec::new();
    for m in 0..queries.heads() {
        for (l, &(h, w)) in dims.levels.iter().enumerate() {
            for k in 0..queries.points() {
                let (x, y) = crate::attention::sample_position(queries.ref_point(q), queries.offset(q, m, l, k), h, w);
                let mut taps = Vec::with_capacity(4);
                tap_block(l, x, y, h, w, &mut taps);
                groups.push(taps);
            }
        }
    }
    groups
}

// ── Analytic stall model ────────────────────────────────────────────

/// Miss-driven stall of an execution order: the per-line fetch cost times the
/// number of lines each query needs that its predecessor did not touch. No
/// prefetch overlap, no capacity effects.
pub fn t_stall_analytic(order: &[usize], footprints: &[Footprint], timing: &TimingConfig) -> u64 {
    let mut stall = 0u64;
    for pair in order.windows(2) {
        let prev = footprints[pair[0]].as_set();
        let new_lines = footprints[pair[1]].lines().iter().filter(|l| !prev.contains(l)).count();
        stall += timing.t_fetch_per_line * new_lines as u64;
    }
    stall
}

// ── Region prefetch ─────────────────────────────────────────────────

/// Chebyshev box of lines around a reference point, clipped to map bounds.
///
/// At radius `r` the box spans the 2x2 block containing the reference point
/// widened by `r` on every side, i.e. at most `(2r+2) x (2r+2)` lines per
/// level. The default radius already includes the +1 bilinear tap spill.
pub fn prefetch_region(ref_point: [f32; 2], radii: &[usize], dims: &PyramidDims) -> Footprint {
    let mut fp = Footprint::new();
    let mut seen = HashSet::new();
    for (level, (&(h, w), &r)) in dims.levels.iter().zip(radii).enumerate() {
        let (x, y) = crate::attention::sample_position(ref_point, [0.0, 0.0], h, w);
        let x_lo = (x.floor() as i64 - r as i64).max(0) as usize;
        let x_hi = ((x.ceil() as i64 + r as i64).max(0) as usize).min(w - 1);
        let y_lo = (y.floor() as i64 - r as i64).max(0) as usize;
        let y_hi = ((y.ceil() as i64 + r as i64).max(0) as usize).min(h - 1);
        for yy in y_lo..=y_hi {
            for xx in x_lo..=x_hi {
                fp.push_unique(LineId { level, y: yy, x: xx }, &mut seen);
            }
        }
    }
    fp
}

/// Per-level prefetch radii from the batch's empirical offset envelope:
/// `ceil(max per-level offset magnitude in pixels) + 1`, the +1 covering the
/// bilinear tap spill.
pub fn empirical_radii(queries: &QueryBatch, dims: &PyramidDims) -> Vec<usize> {
    let mut max_px = vec![0.0f64; dims.num_levels()];
    for q in 0..queries.len() {
        for m in 0..queries.heads() {
            for (l, &(h, w)) in dims.levels.iter().enumerate() {
                for k in 0..queries.points() {
                    let off = queries.offset(q, m, l, k);
                    let px = (off[0] as f64 * (w - 1) as f64).abs();
                    let py = (off[1] as f64 * (h - 1) as f64).abs();
                    max_px[l] = max_px[l].max(px).max(py);
                }
            }
        }
    }
    max_px.iter().map(|&m| m.ceil() as usize + 1).collect()
}

/// Validates that the worst-case region fits one ping-pong buffer, naming the
/// widest level on failure.
pub fn check_region_fit(radii: &[usize], dims: &PyramidDims, geometry: &CacheGeometry) -> Result<()> {
    let mut total = 0usize;
    let mut worst = (0usize, 0usize, 0usize); // (lines, level, radius)
    for (level, (&(h, w), &r)) in dims.levels.iter().zip(radii).enumerate() {
        let side = 2 * r + 2;
        let lines = side.min(w) * side.min(h);
        total += lines;
        if lines > worst.0 {
            worst = (lines, level, r);
        }
    }
    if total > geometry.buffer_lines() {
        return Err(Error::RegionOverflow {
            level: worst.1,
            radius: worst.2,
            region_lines: total,
            buffer_lines: geometry.buffer_lines(),
        });
    }
    Ok(())
}

// ── Simulators ──────────────────────────────────────────────────────

/// Direct-mapped simulation of an ordered footprint trace.
///
/// Every miss stalls for one full line fetch; there is no prefetch.
pub fn simulate_baseline(
    trace: &[Footprint],
    geometry: &CacheGeometry,
    timing: &TimingConfig,
    dims: &PyramidDims,
) -> Result<SimReport> {
    simulate_baseline_recorded(trace, geometry, timing, dims).map(|(report, _)| report)
}

/// Direct-mapped simulation that also returns the hit/miss sequence, one
/// flag per access in trace order.
pub fn simulate_baseline_recorded(
    trace: &[Footprint],
    geometry: &CacheGeometry,
    timing: &TimingConfig,
    dims: &PyramidDims,
) -> Result<(SimReport, Vec<bool>)> {
    if geometry.policy != CachePolicy::DirectMapped {
        return Err(Error::Config("simulate_baseline requires the direct_mapped policy".into()));
    }
    let mut slots: Vec<Option<usize>> = vec![None; geometry.capacity_lines];
    let mut report = SimReport::default();
    let mut sequence = Vec::new();
    for fp in trace {
        for line in fp.lines() {
            let addr = line.flat(dims);
            let index = addr % geometry.capacity_lines;
            report.accesses += 1;
            let hit = slots[index] == Some(addr);
            sequence.push(hit);
            if hit {
                report.hits += 1;
            } else {
                report.misses += 1;
                report.fetched_lines += 1;
                report.stall_cycles += timing.t_fetch_per_line;
                slots[index] = Some(addr);
            }
        }
    }
    report.total_cycles = trace.len() as u64 * timing.t_comp_per_query + report.stall_cycles;
    Ok((report.finish(geometry, timing), sequence))
}

/// Ping-pong region-prefetch simulation of a scheduled trace.
///
/// `regions[i]` is the line set prefetched for step `i` during the compute of
/// step `i-1` (`regions[0]` is the cold start). `order`, `footprints` and
/// `regions` must agree: `footprints` is indexed by query, `regions` by step.
pub fn simulate_dooq_pingpong(
    order: &[usize],
    footprints: &[Footprint],
    regions: &[Footprint],
    geometry: &CacheGeometry,
    timing: &TimingConfig,
) -> Result<SimReport> {
    if geometry.policy != CachePolicy::DooqPingpong {
        return Err(Error::Config("simulate_dooq_pingpong requires the dooq_pingpong policy".into()));
    }
    if regions.len() != order.len() {
        return Err(Error::Config(format!(
            "schedule has {} steps but {} prefetch regions",
            order.len(),
            regions.len()
        )));
    }
    let buffer = geometry.buffer_lines();
    let mut report = SimReport::default();
    let mut resident: HashSet<LineId> = HashSet::new();
    let mut reuse_sum = 0.0f64;
    let mut reuse_steps = 0u64;

    for (step, (&q, region)) in order.iter().zip(regions).enumerate() {
        if region.len() > buffer {
            return Err(Error::Config(format!(
                "prefetch region at step {step} holds {} lines; one ping-pong buffer holds {buffer}",
                region.len()
            )));
        }
        report.peak_buffer_lines = report.peak_buffer_lines.max(region.len() as u64);

        // incremental fetch for this step's region, overlapped with the
        // previous step's compute
        let carried = region.lines().iter().filter(|l| resident.contains(l)).count() as u64;
        let fetched = region.len() as u64 - carried;
        report.fetched_lines += fetched;
        let fetch_cycles = fetched * timing.t_fetch_per_line;
        if step == 0 {
            report.cold_start_cycles = fetch_cycles;
        } else {
            report.stall_cycles += fetch_cycles.saturating_sub(timing.t_comp_per_query);
            report.covered_cycles += fetch_cycles.min(timing.t_comp_per_query);
            if !region.is_empty() {
                reuse_sum += carried as f64 / region.len() as f64;
            }
            reuse_steps += 1;
        }

        // buffer swap: the new active buffer holds exactly this region
        let region_set = region.as_set();

        // compute accesses: carried lines hit, fresh region lines are
        // prefetch-covered misses, off-region lines take the victim path
        for line in footprints[q].lines() {
            report.accesses += 1;
            if region_set.contains(line) {
                if resident.contains(line) {
                    report.hits += 1;
                } else {
                    report.misses += 1;
                }
            } else {
                report.misses += 1;
                report.fetched_lines += 1;
                report.stall_cycles += timing.t_fetch_per_line;
            }
        }
        resident = region_set;
    }

    report.regional_reuse = if reuse_steps == 0 { 0.0 } else { reuse_sum / reuse_steps as f64 };
    report.total_cycles =
        order.len() as u64 * timing.t_comp_per_query + report.stall_cycles + report.cold_start_cycles;
    Ok(report.finish(geometry, timing))
}

// ── Bank conflicts ──────────────────────────────────────────────────

/// Bank index of a line under the 2x2-aligned interleave `(x + 2y) mod banks`.
pub fn bank_of(line: &LineId, banks: usize) -> usize {
    (line.x + 2 * line.y) % banks
}

/// Same-bank pairs inside one tap group.
pub fn bank_conflicts_in_group(group: &[LineId], banks: usize) -> u64 {
    let mut count = 0u64;
    for i in 0..group.len() {
        for j in i + 1..group.len() {
            if bank_of(&group[i], banks) == bank_of(&group[j], banks) {
                count += 1;
            }
        }
    }
    count
}

/// Total same-bank pairs across all of a query's 2x2 tap groups. Diagnostic
/// only; no timing penalty is applied by default.
pub fn query_bank_conflicts(queries: &QueryBatch, q: usize, dims: &PyramidDims, banks: usize) -> u64 {
    query_tap_groups(queries, q, dims)
        .iter()
        .map(|g| bank_conflicts_in_group(g, banks))
        .sum()
}
