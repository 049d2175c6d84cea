//! Versioned trace files: a schedule, its footprints and prefetch regions,
//! and the per-access hit/miss records, self-contained enough to replay the
//! cache simulation without regenerating the workload.

use std::path::Path;

use serde::{Deserialize, Serialize};

use deformsim::attention::PyramidDims;
use deformsim::cache::{
    simulate_dooq_pingpong, CacheGeometry, Footprint, LineId, SimReport, TimingConfig,
};
use deformsim::scheduler::Schedule;

use crate::config::ExperimentConfig;
use crate::experiment::run_point;
use crate::{HarnessError, Result};

pub const TRACE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub version: u32,
    pub seed: u64,
    pub dims: PyramidDims,
    pub channels: usize,
    pub heads: usize,
    pub points: usize,
    pub query_count: usize,
    pub window: usize,
}

/// One access in replay order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessRecord {
    pub step: u32,
    pub line: LineId,
    pub hit: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceFile {
    pub header: TraceHeader,
    pub schedule: Schedule,
    /// Indexed by query position in the generated batch.
    pub footprints: Vec<Footprint>,
    /// Indexed by schedule step.
    pub regions: Vec<Footprint>,
    pub geometry: CacheGeometry,
    pub timing: TimingConfig,
    pub accesses: Vec<AccessRecord>,
}

impl TraceFile {
    pub fn save(&self, path: &Path) -> Result<()> {
        let body = serde_json::to_string(self).map_err(|e| HarnessError::Trace(e.to_string()))?;
        std::fs::write(path, body).map_err(|e| HarnessError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        let trace: TraceFile =
            serde_json::from_str(&text).map_err(|e| HarnessError::Trace(e.to_string()))?;
        if trace.header.version != TRACE_VERSION {
            return Err(HarnessError::Trace(format!(
                "unsupported trace version {} (expected {TRACE_VERSION})",
                trace.header.version
            )));
        }
        if trace.regions.len() != trace.schedule.order.len() {
            return Err(HarnessError::Trace("region count disagrees with schedule length".into()));
        }
        Ok(trace)
    }

    /// Re-runs the ping-pong simulation from the stored schedule, footprints
    /// and regions.
    pub fn replay(&self) -> Result<SimReport> {
        Ok(simulate_dooq_pingpong(
            &self.schedule.order,
            &self.footprints,
            &self.regions,
            &self.geometry,
            &self.timing,
        )?)
    }
}

/// Derives per-access records with a deliberately separate replay of the
/// ping-pong hit rules (carried lines hit, region lines are covered misses,
/// off-region lines are victim misses).
fn derive_accesses(schedule: &Schedule, footprints: &[Footprint], regions: &[Footprint]) -> Vec<AccessRecord> {
    let mut records = Vec::new();
    let mut resident: std::collections::HashSet<LineId> = std::collections::HashSet::new();
    for (step, (&q, region)) in schedule.order.iter().zip(regions).enumerate() {
        let region_set = region.as_set();
        for &line in footprints[q].lines() {
            let hit = region_set.contains(&line) && resident.contains(&line);
            records.push(AccessRecord { step: step as u32, line, hit });
        }
        resident = region_set;
    }
    records
}

/// Builds a trace for one (config, seed) point and cross-checks the derived
/// access records against the simulator's counters.
pub fn export_trace(config: &ExperimentConfig, seed: u64) -> Result<TraceFile> {
    config.validate()?;
    let spec = config.workload_spec(seed);
    let (pyramid, batch) = deformsim::workload::generate_workload(&spec)?;
    let dims = pyramid.dims();
    let fps = deformsim::cache::footprints(&batch, &dims);
    let outcome = run_point(config, seed)?;

    let radii = deformsim::cache::empirical_radii(&batch, &dims);
    let regions: Vec<Footprint> = outcome
        .schedule
        .order
        .iter()
        .map(|&q| deformsim::cache::prefetch_region(batch.ref_point(q), &radii, &dims))
        .collect();

    let accesses = derive_accesses(&outcome.schedule, &fps, &regions);
    let hits = accesses.iter().filter(|a| a.hit).count() as u64;
    if hits != outcome.pingpong.hits || accesses.len() as u64 != outcome.pingpong.accesses {
        return Err(HarnessError::Trace(format!(
            "derived access records disagree with the simulator: {hits}/{} vs {}/{}",
            accesses.len(),
            outcome.pingpong.hits,
            outcome.pingpong.accesses
        )));
    }

    let bytes_per_line = config.workload.channels * config.geometry.bytes_per_element;
    Ok(TraceFile {
        header: TraceHeader {
            version: TRACE_VERSION,
            seed,
            dims,
            channels: config.workload.channels,
            heads: config.workload.heads,
            points: config.workload.points,
            query_count: batch.len(),
            window: config.scheduler.window,
        },
        schedule: outcome.schedule,
        footprints: fps,
        regions,
        geometry: deformsim::cache::CacheGeometry::new(
            deformsim::cache::CachePolicy::DooqPingpong,
            config.geometry.capacity_lines,
            config.geometry.banks,
            bytes_per_line,
        )?,
        timing: deformsim::cache::TimingConfig::new(
            config.timing.t_fetch_per_line,
            config.t_comp_per_query(),
            config.timing.energy_per_bit_pj,
        )?,
        accesses,
    })
}
