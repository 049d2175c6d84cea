//! Sweep orchestration: workload generation, scheduling, cache simulation of
//! both policies, and report-row assembly.
//!
//! Sweep points and seeds run as an embarrassingly parallel pool; rows are
//! ordered deterministically (sweep order, then seed order) regardless of
//! execution interleaving, so a config file maps to exactly one report.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use deformsim::attention::msdeformattn_fused;
use deformsim::cache::{
    check_region_fit, empirical_radii, footprints, prefetch_region, query_bank_conflicts,
    simulate_baseline, simulate_dooq_pingpong, CacheGeometry, CachePolicy, SimReport, TimingConfig,
};
use deformsim::fixedpoint::{msdeformattn_fused_quantized, QuantizerConfig};
use deformsim::scheduler::{dooq_schedule, Schedule, SchedulerConfig};
use deformsim::workload::{generate_workload, random_instance, InstanceSpec};

use crate::config::{ExperimentConfig, SweepParameter};
use crate::{HarnessError, Result};

/// One report row: the configured policy's metrics for one sweep point and
/// seed, with the same-capacity direct-mapped baseline alongside.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub sweep_parameter: String,
    pub sweep_value: f64,
    pub seed: u64,
    pub policy: String,
    pub window: usize,
    pub rho: f64,
    pub queries: usize,
    pub accesses: u64,
    pub hits: u64,
    pub misses: u64,
    pub hit_rate: f64,
    pub fetched_lines: u64,
    pub stall_cycles: u64,
    pub covered_cycles: u64,
    pub cold_start_cycles: u64,
    pub total_cycles: u64,
    pub energy_pj: f64,
    pub regional_reuse: f64,
    /// Same-bank tap pairs across all 2x2 sample groups of the workload.
    pub bank_conflicts: u64,
    pub baseline_hit_rate: f64,
    pub baseline_stall_cycles: u64,
    pub baseline_total_cycles: u64,
    pub baseline_fetched_lines: u64,
    pub baseline_energy_pj: f64,
    pub speedup_vs_baseline: f64,
    pub quant_error: Option<f64>,
    /// Total fixed-point saturation events in the quantized run.
    pub quant_saturation: Option<u64>,
}

/// Simulation products of one (config, seed) point, before row assembly.
pub struct PointOutcome {
    pub schedule: Schedule,
    pub pingpong: SimReport,
    pub baseline: SimReport,
    pub queries: usize,
    pub bank_conflicts: u64,
    pub quant_error: Option<f64>,
    pub quant_saturation: Option<u64>,
}

fn apply_sweep(config: &ExperimentConfig, parameter: SweepParameter, value: f64) -> Result<ExperimentConfig> {
    let mut resolved = config.clone();
    match parameter {
        SweepParameter::None => {}
        SweepParameter::Window => {
            if value < 1.0 || value.fract() != 0.0 {
                return Err(HarnessError::config("sweep.values", format!("window must be a positive integer, got {value}")));
            }
            resolved.scheduler.window = value as usize;
        }
        SweepParameter::Rho => {
            if resolved.workload.mode != "sparse_encoder" {
                return Err(HarnessError::config(
                    "sweep.parameter",
                    "rho sweeps require workload.mode = sparse_encoder",
                ));
            }
            resolved.workload.rho = value;
        }
        SweepParameter::CapacityLines => {
            if value < 2.0 || value.fract() != 0.0 {
                return Err(HarnessError::config("sweep.values", format!("capacity_lines must be an integer >= 2, got {value}")));
            }
            resolved.geometry.capacity_lines = value as usize;
        }
    }
    Ok(resolved)
}

/// Runs one fully resolved (config, seed) point.
pub fn run_point(config: &ExperimentConfig, seed: u64) -> Result<PointOutcome> {
    let spec = config.workload_spec(seed);
    let (pyramid, batch) = generate_workload(&spec)?;
    let dims = pyramid.dims();
    let fps = footprints(&batch, &dims);

    let scheduler = SchedulerConfig::new(config.scheduler.window, config.scheduler.parallelism, config.workload.channels);
    let schedule = dooq_schedule(&batch, &scheduler);

    let timing = TimingConfig::new(
        config.timing.t_fetch_per_line,
        config.t_comp_per_query(),
        config.timing.energy_per_bit_pj,
    )?;
    let bytes_per_line = config.workload.channels * config.geometry.bytes_per_element;
    let pingpong_geometry = CacheGeometry::new(
        CachePolicy::DooqPingpong,
        config.geometry.capacity_lines,
        config.geometry.banks,
        bytes_per_line,
    )?;
    let baseline_geometry = CacheGeometry::new(
        CachePolicy::DirectMapped,
        config.geometry.capacity_lines,
        config.geometry.banks,
        bytes_per_line,
    )?;

    let radii = empirical_radii(&batch, &dims);
    check_region_fit(&radii, &dims, &pingpong_geometry)?;
    let regions: Vec<_> = schedule
        .order
        .iter()
        .map(|&q| prefetch_region(batch.ref_point(q), &radii, &dims))
        .collect();

    let mut pingpong = simulate_dooq_pingpong(&schedule.order, &fps, &regions, &pingpong_geometry, &timing)?;
    let mut baseline = simulate_baseline(&fps, &baseline_geometry, &timing, &dims)?;

    // bank conflicts are a diagnostic; an optional per-conflict penalty
    // stretches both policies' totals identically
    let bank_conflicts: u64 =
        (0..batch.len()).map(|q| query_bank_conflicts(&batch, q, &dims, config.geometry.banks)).sum();
    let penalty = config.timing.bank_penalty_cycles * bank_conflicts;
    pingpong.total_cycles += penalty;
    baseline.total_cycles += penalty;

    let (quant_error, quant_saturation) = if config.precision.enabled {
        // folded weights for the kernel comparison come from a seeded
        // instance generator; the workload supplies pyramid and queries
        let instance = InstanceSpec {
            channels: config.workload.channels,
            heads: config.workload.heads,
            levels: config.workload.levels.len(),
            points: config.workload.points,
            queries: 1,
            ..InstanceSpec::default()
        };
        let (_, _, weights) = random_instance(&instance, seed);
        let float = msdeformattn_fused(&pyramid, &batch, &weights)?;
        let quant = msdeformattn_fused_quantized(&pyramid, &batch, &weights, &QuantizerConfig::default())?;
        let num: f64 = quant
            .output
            .data()
            .iter()
            .zip(float.data())
            .map(|(&a, &b)| ((a - b) as f64).powi(2))
            .sum();
        let den: f64 = float.data().iter().map(|&b| (b as f64).powi(2)).sum();
        (Some((num / den.max(1e-30)).sqrt()), Some(quant.saturation.total()))
    } else {
        (None, None)
    };

    Ok(PointOutcome {
        schedule,
        pingpong,
        baseline,
        queries: batch.len(),
        bank_conflicts,
        quant_error,
        quant_saturation,
    })
}

fn assemble_row(
    config: &ExperimentConfig,
    parameter: &str,
    value: f64,
    seed: u64,
    outcome: &PointOutcome,
) -> Result<ReportRow> {
    // the row reports the configured policy; the direct-mapped run is always
    // present as the comparison columns
    let policy = config.cache_policy()?;
    let (primary, speedup) = match policy {
        CachePolicy::DooqPingpong => (
            &outcome.pingpong,
            outcome.baseline.total_cycles as f64 / outcome.pingpong.total_cycles.max(1) as f64,
        ),
        CachePolicy::DirectMapped => (&outcome.baseline, 1.0),
    };
    Ok(ReportRow {
        sweep_parameter: parameter.to_string(),
        sweep_value: value,
        seed,
        policy: config.geometry.policy.clone(),
        window: config.scheduler.window,
        rho: config.workload.rho,
        queries: outcome.queries,
        accesses: primary.accesses,
        hits: primary.hits,
        misses: primary.misses,
        hit_rate: primary.hit_rate,
        fetched_lines: primary.fetched_lines,
        stall_cycles: primary.stall_cycles,
        covered_cycles: primary.covered_cycles,
        cold_start_cycles: primary.cold_start_cycles,
        total_cycles: primary.total_cycles,
        energy_pj: primary.energy_pj,
        regional_reuse: primary.regional_reuse,
        bank_conflicts: outcome.bank_conflicts,
        baseline_hit_rate: outcome.baseline.hit_rate,
        baseline_stall_cycles: outcome.baseline.stall_cycles,
        baseline_total_cycles: outcome.baseline.total_cycles,
        baseline_fetched_lines: outcome.baseline.fetched_lines,
        baseline_energy_pj: outcome.baseline.energy_pj,
        speedup_vs_baseline: speedup,
        quant_error: outcome.quant_error,
        quant_saturation: outcome.quant_saturation,
    })
}

/// Runs every sweep point x seed and returns rows in deterministic order.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<ReportRow>> {
    config.validate()?;
    let parameter = config.sweep_parameter()?;
    let values: Vec<f64> = match parameter {
        SweepParameter::None => vec![f64::NAN],
        _ => {
            if config.sweep.values.is_empty() {
                return Err(HarnessError::config("sweep.values", "sweep value list must not be empty"));
            }
            config.sweep.values.clone()
        }
    };

    // resolve every point eagerly so config errors surface before any work
    let mut points = Vec::new();
    for (vi, &value) in values.iter().enumerate() {
        let resolved = apply_sweep(config, parameter, if value.is_nan() { 0.0 } else { value })?;
        for &seed in &config.seeds {
            points.push((vi, value, seed, resolved.clone()));
        }
    }

    let mut rows: Vec<(usize, u64, ReportRow)> = points
        .into_par_iter()
        .map(|(vi, value, seed, resolved)| {
            let outcome = run_point(&resolved, seed)?;
            let shown_value = if value.is_nan() { 0.0 } else { value };
            let row = assemble_row(&resolved, &config.sweep.parameter, shown_value, seed, &outcome)?;
            Ok((vi, seed, row))
        })
        .collect::<Result<Vec<_>>>()?;

    rows.sort_by_key(|r| (r.0, r.1));
    Ok(rows.into_iter().map(|(_, _, row)| row).collect())
}
