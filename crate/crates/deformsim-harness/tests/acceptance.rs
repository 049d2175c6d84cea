//! Acceptance suite: one test per criterion, each printing a PASS/FAIL line
//! with its measured margins (run with `--nocapture` to see them all).

use std::collections::HashSet;
use std::time::Instant;

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};

use deformsim::cache::{
    simulate_dooq_pingpong, t_stall_analytic, CacheGeometry, CachePolicy, Footprint, LineId,
    TimingConfig,
};
use deformsim::scheduler::{sorter_cost, SchedulerConfig};
use deformsim_harness::config::ExperimentConfig;
use deformsim_harness::experiment::run_experiment;
use deformsim_harness::verify::{
    cache_oracle_suite, fused_reference_suite, quantized_suite, scheduler_gap, VerifyOptions,
};

fn report(criterion: u32, passed: bool, detail: &str) {
    println!("ACCEPTANCE {criterion} {}: {detail}", if passed { "PASS" } else { "FAIL" });
    assert!(passed, "criterion {criterion}: {detail}");
}

// ── 1. fused-path correctness ───────────────────────────────────────

#[test]
fn criterion_01_fused_path_correctness() {
    let start = Instant::now();
    let opts = VerifyOptions { seed: 0, instances: 100, ..VerifyOptions::default() };
    let suite = fused_reference_suite(&opts);
    let elapsed = start.elapsed();
    let passed = suite.passed && elapsed.as_secs_f64() < 10.0;
    report(1, passed, &format!("{} in {:.2}s (< 10s)", suite.detail, elapsed.as_secs_f64()));
}

// ── 2. analytic stall exactness ─────────────────────────────────────

fn random_footprints(rng: &mut StdRng, n: usize) -> Vec<Footprint> {
    (0..n)
        .map(|_| {
            let lines: Vec<LineId> = (0..rng.gen_range(1..12))
                .map(|_| LineId { level: 0, y: rng.gen_range(0..6), x: rng.gen_range(0..6) })
                .collect();
            Footprint::from_lines(lines)
        })
        .collect()
}

#[test]
fn criterion_02_analytic_stall_exactness() {
    let mut rng = StdRng::seed_from_u64(2);
    let timing = TimingConfig::new(3, 0, 1.21).unwrap();
    let geometry = CacheGeometry::new(CachePolicy::DooqPingpong, 64, 8, 128).unwrap();
    let mut checked = 0;
    for _ in 0..100 {
        let n = rng.gen_range(2..12);
        let fps = random_footprints(&mut rng, n);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);

        // independent set-difference computation
        let mut expect = 0u64;
        for pair in order.windows(2) {
            let prev: HashSet<LineId> = fps[pair[0]].lines().iter().copied().collect();
            let next: HashSet<LineId> = fps[pair[1]].lines().iter().copied().collect();
            expect += timing.t_fetch_per_line * next.difference(&prev).count() as u64;
        }
        let analytic = t_stall_analytic(&order, &fps, &timing);
        assert_eq!(analytic, expect, "analytic stall diverges from set arithmetic");

        // ping-pong with zero compute and full-footprint regions reproduces it
        let regions: Vec<Footprint> = order.iter().map(|&q| fps[q].clone()).collect();
        let sim = simulate_dooq_pingpong(&order, &fps, &regions, &geometry, &timing).unwrap();
        assert_eq!(sim.stall_cycles, analytic, "simulator stall diverges from the analytic model");
        checked += 1;
    }
    report(2, checked == 100, &format!("{checked} random schedules match exactly, simulator included"));
}

// ── 3. cache oracle equivalence ─────────────────────────────────────

#[test]
fn criterion_03_cache_oracle_equivalence() {
    let opts = VerifyOptions { seed: 3, traces: 100, ..VerifyOptions::default() };
    let suite = cache_oracle_suite(&opts);
    report(3, suite.passed, &suite.detail);
}

// ── 4. scheduler optimality gap ─────────────────────────────────────

#[test]
fn criterion_04_dooq_optimality_gap() {
    let start = Instant::now();
    let opts = VerifyOptions { seed: 4, cluster_instances: 50, ..VerifyOptions::default() };
    let gap = scheduler_gap(&opts);
    let elapsed = start.elapsed();
    let passed = gap.dooq_never_worse_than_identity
        && gap.mean_ratio_vs_optimal <= 1.5
        && elapsed.as_secs_f64() < 60.0;
    report(
        4,
        passed,
        &format!(
            "50 instances (n=8, w_d=8): never worse than identity = {}, mean ratio vs exhaustive optimum \
             {:.4} (<= 1.5), max {:.4}, in {:.2}s (< 60s)",
            gap.dooq_never_worse_than_identity,
            gap.mean_ratio_vs_optimal,
            gap.max_ratio_vs_optimal,
            elapsed.as_secs_f64()
        ),
    );
}

// ── 5. window-sweep hit-rate analogue ───────────────────────────────

fn window_sweep_config() -> ExperimentConfig {
    let toml = r#"version = 1
seeds = [1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16, 17, 18, 19, 20]

[workload]
mode = "decoder"
n_d = 2048
levels = [[64, 64], [32, 32], [16, 16], [8, 8]]
channels = 32
heads = 4
points = 4
distribution = "clustered"
clusters = 8
spread = 0.05
offset_envelope = 0.02

[scheduler]
window = 512
parallelism = 8

[geometry]
policy = "dooq_pingpong"
capacity_lines = 384
banks = 8
bytes_per_element = 4

[timing]
t_fetch_per_line = 4
energy_per_bit_pj = 1.21

[sweep]
parameter = "window"
values = [1, 8, 64, 512]
"#;
    ExperimentConfig::from_toml_str(toml, &[]).unwrap()
}

#[test]
fn criterion_05_window_sweep_hit_rate_analogue() {
    let rows = run_experiment(&window_sweep_config()).unwrap();
    let sweep = [1usize, 8, 64, 512];
    let mut mean_hit = Vec::new();
    let mut mean_baseline = Vec::new();
    for &w in &sweep {
        let of_w: Vec<_> = rows.iter().filter(|r| r.window == w).collect();
        assert_eq!(of_w.len(), 20, "expected 20 seeds at w_d = {w}");
        mean_hit.push(of_w.iter().map(|r| r.hit_rate).sum::<f64>() / of_w.len() as f64);
        mean_baseline.push(of_w.iter().map(|r| r.baseline_hit_rate).sum::<f64>() / of_w.len() as f64);
    }
    let monotone = mean_hit.windows(2).all(|p| p[1] >= p[0]);
    let ratio = mean_hit[3] / mean_baseline[3].max(1e-12);
    let passed = monotone && ratio >= 2.0;
    report(
        5,
        passed,
        &format!(
            "mean hit rate over w_d {{1, 8, 64, 512}} = {:.4}/{:.4}/{:.4}/{:.4} (non-decreasing = {monotone}), \
             vs direct-mapped baseline {:.4}: {ratio:.2}x at w_d=512 (>= 2x)",
            mean_hit[0], mean_hit[1], mean_hit[2], mean_hit[3], mean_baseline[3]
        ),
    );
}

// ── 6. sparsity-scaling analogue ────────────────────────────────────

fn rho_sweep_config() -> ExperimentConfig {
    let toml = r#"version = 1
seeds = [1, 2, 3]

[workload]
mode = "sparse_encoder"
rho = 1.0
levels = [[64, 64], [32, 32], [16, 16], [8, 8]]
channels = 32
heads = 4
points = 4
distribution = "grid"
offset_envelope = 0.02

[scheduler]
window = 512
parallelism = 4

[geometry]
policy = "dooq_pingpong"
capacity_lines = 384
banks = 8
bytes_per_element = 4

[timing]
t_fetch_per_line = 1
energy_per_bit_pj = 1.21

[sweep]
parameter = "rho"
values = [1.0, 0.5, 0.1]
"#;
    ExperimentConfig::from_toml_str(toml, &[]).unwrap()
}

#[test]
fn criterion_06_sparsity_scaling_analogue() {
    let rows = run_experiment(&rho_sweep_config()).unwrap();
    let mut worst_gap = 0.0f64;
    for seed in [1u64, 2, 3] {
        let dense = rows
            .iter()
            .find(|r| r.seed == seed && r.rho == 1.0)
            .expect("dense row");
        for rho in [0.5f64, 0.1] {
            let row = rows.iter().find(|r| r.seed == seed && r.rho == rho).expect("sparse row");
            let ideal = row.queries as f64 / dense.queries as f64;
            let actual = row.total_cycles as f64 / dense.total_cycles as f64;
            worst_gap = worst_gap.max((actual / ideal - 1.0).abs());
        }
    }
    let passed = worst_gap <= 0.25;
    report(
        6,
        passed,
        &format!(
            "total_cycles vs kept-query proportionality over rho {{1.0, 0.5, 0.1}}: worst gap {:.4} (<= 0.25)",
            worst_gap
        ),
    );
}

// ── 7. quantization proxy ───────────────────────────────────────────

#[test]
fn criterion_07_quantization_proxy() {
    let opts = VerifyOptions { seed: 7, quant_seeds: 100, ..VerifyOptions::default() };
    let suite = quantized_suite(&opts);
    report(7, suite.passed, &suite.detail);
}

// ── 8. sorter cost model ────────────────────────────────────────────

#[test]
fn criterion_08_sorter_model() {
    let config = SchedulerConfig::new(1024, 8, 256);
    for occupancy in 1..=1024usize {
        let s = if occupancy <= 1 { 0 } else { (occupancy as f64).log2().ceil() as usize };
        assert_eq!(
            sorter_cost(occupancy, &config).stages,
            s * (s + 1) / 2,
            "stage count at occupancy {occupancy}"
        );
    }
    let at_p8 = sorter_cost(512, &SchedulerConfig::new(512, 8, 256));
    let at_p4 = sorter_cost(512, &SchedulerConfig::new(512, 4, 256));
    let passed = at_p8.stages == 45 && !at_p8.fits_in_slack && at_p4.fits_in_slack;
    report(
        8,
        passed,
        &format!(
            "stages match s(s+1)/2 for occupancy 1..=1024; occupancy 512 @ D=256: stages {}, \
             p_d=8 fits={}, p_d=4 fits={}",
            at_p8.stages, at_p8.fits_in_slack, at_p4.fits_in_slack
        ),
    );
}

// ── 9. determinism ──────────────────────────────────────────────────

#[test]
fn criterion_09_byte_identical_reports() {
    let dir = std::env::temp_dir().join("deformsim-acceptance-determinism");
    std::fs::create_dir_all(&dir).unwrap();
    let config_path = dir.join("det.toml");
    let config_toml = r#"version = 1
seeds = [1, 2]

[workload]
mode = "decoder"
n_d = 256
levels = [[32, 32], [16, 16]]
channels = 32
heads = 4
points = 4
distribution = "clustered"
clusters = 4
spread = 0.04
offset_envelope = 0.02

[scheduler]
window = 32

[geometry]
capacity_lines = 384

[sweep]
parameter = "window"
values = [1, 32]
"#;
    std::fs::write(&config_path, config_toml).unwrap();

    let bin = env!("CARGO_BIN_EXE_deformsim-harness");
    let mut bodies = Vec::new();
    for run in 0..2 {
        let out = dir.join(format!("report-{run}.csv"));
        let status = std::process::Command::new(bin)
            .args(["run", "--config"])
            .arg(&config_path)
            .arg("--out")
            .arg(&out)
            .status()
            .expect("harness binary runs");
        assert!(status.success(), "run {run} failed");
        bodies.push(std::fs::read(&out).unwrap());
    }
    let passed = bodies[0] == bodies[1];
    report(9, passed, &format!("two CLI runs of the same config file: {} bytes, identical", bodies[0].len()));
}

// ── 10. energy conservation ─────────────────────────────────────────

#[test]
fn criterion_10_energy_conservation() {
    let config = window_sweep_config();
    let bytes_per_line = (config.workload.channels * config.geometry.bytes_per_element) as u64;
    let mut rows = run_experiment(&ExperimentConfig {
        seeds: vec![1, 2, 3],
        sweep: deformsim_harness::config::SweepSection { parameter: "window".into(), values: vec![1.0, 64.0] },
        ..config
    })
    .unwrap();
    // also cover a direct-mapped primary row
    let mut dm_config = rho_sweep_config();
    dm_config.geometry.policy = "direct_mapped".into();
    dm_config.seeds = vec![1];
    dm_config.sweep.values = vec![1.0, 0.1];
    rows.extend(run_experiment(&dm_config).unwrap());

    let mut checked = 0;
    for row in &rows {
        let expect = (row.fetched_lines * bytes_per_line * 8) as f64 * 1.21;
        assert_eq!(row.energy_pj, expect, "energy conservation violated in a report row");
        let expect_baseline = (row.baseline_fetched_lines * bytes_per_line * 8) as f64 * 1.21;
        assert_eq!(row.baseline_energy_pj, expect_baseline, "baseline energy conservation violated");
        checked += 1;
    }
    report(
        10,
        checked > 0,
        &format!("energy_pj == fetched_lines x bytes_per_line x 8 x 1.21 exactly in {checked} rows (both policies)"),
    );
}
