//! Statistical locality invariants of the scheduler/cache pair on clustered
//! workloads: means over seed ensembles, not per-instance claims.

use deformsim::cache::{
    empirical_radii, footprints, prefetch_region, simulate_dooq_pingpong, t_stall_analytic,
    CacheGeometry, CachePolicy, TimingConfig,
};
use deformsim::scheduler::{dooq_schedule, SchedulerConfig};
use deformsim::workload::{generate_workload, Distribution, WorkloadMode, WorkloadSpec};

fn clustered_spec(seed: u64) -> WorkloadSpec {
    WorkloadSpec {
        mode: WorkloadMode::Decoder { n_d: 96 },
        levels: vec![(32, 32), (16, 16)],
        channels: 32,
        heads: 2,
        points: 2,
        distribution: Distribution::Clustered { clusters: 4, spread: 0.02 },
        offset_envelope: 0.02,
        seed,
    }
}

fn timing() -> TimingConfig {
    TimingConfig::new(2, 0, 1.21).unwrap()
}

fn mean_stall(window: usize, seeds: std::ops::Range<u64>) -> f64 {
    let mut total = 0.0;
    let mut count = 0;
    for seed in seeds {
        let (pyramid, batch) = generate_workload(&clustered_spec(seed)).unwrap();
        let dims = pyramid.dims();
        let fps = footprints(&batch, &dims);
        let schedule = dooq_schedule(&batch, &SchedulerConfig::new(window, 8, 32));
        total += t_stall_analytic(&schedule.order, &fps, &timing()) as f64;
        count += 1;
    }
    total / count as f64
}

#[test]
fn locality_dominance_over_identity_in_the_mean() {
    // clustered workloads, 24 seeds, full window: the scheduler strictly
    // beats the scattered generation order on average
    let mut dooq = 0.0;
    let mut identity = 0.0;
    for seed in 0..24u64 {
        let (pyramid, batch) = generate_workload(&clustered_spec(seed)).unwrap();
        let dims = pyramid.dims();
        let fps = footprints(&batch, &dims);
        let schedule = dooq_schedule(&batch, &SchedulerConfig::new(batch.len(), 8, 32));
        let order_id: Vec<usize> = (0..batch.len()).collect();
        dooq += t_stall_analytic(&schedule.order, &fps, &timing()) as f64;
        identity += t_stall_analytic(&order_id, &fps, &timing()) as f64;
    }
    assert!(
        dooq < identity,
        "mean stall under the scheduler ({dooq:.0}) should beat identity ({identity:.0})"
    );
}

#[test]
fn mean_stall_is_non_increasing_in_window() {
    // per-seed monotonicity is not claimed; the mean over seeds is
    let windows = [1usize, 4, 16, 96];
    let means: Vec<f64> = windows.iter().map(|&w| mean_stall(w, 0..24)).collect();
    for pair in means.windows(2) {
        assert!(
            pair[1] <= pair[0] + 1e-9,
            "mean stall increased along the window sweep: {means:?}"
        );
    }
}

#[test]
fn hit_rate_is_schedule_sensitive_in_the_mean() {
    // ping-pong hit rate under the scheduler beats the scattered identity
    // order, mean over 20 seeds
    let geometry = CacheGeometry::new(CachePolicy::DooqPingpong, 512, 8, 128).unwrap();
    let timing = TimingConfig::new(4, 32, 1.21).unwrap();
    let mut dooq_hits = 0.0;
    let mut identity_hits = 0.0;
    for seed in 0..20u64 {
        let (pyramid, batch) = generate_workload(&clustered_spec(seed)).unwrap();
        let dims = pyramid.dims();
        let fps = footprints(&batch, &dims);
        let radii = empirical_radii(&batch, &dims);
        let run = |order: &[usize]| {
            let regions: Vec<_> = order
                .iter()
                .map(|&q| prefetch_region(batch.ref_point(q), &radii, &dims))
                .collect();
            simulate_dooq_pingpong(order, &fps, &regions, &geometry, &timing).unwrap().hit_rate
        };
        let schedule = dooq_schedule(&batch, &SchedulerConfig::new(batch.len(), 8, 32));
        let identity: Vec<usize> = (0..batch.len()).collect();
        dooq_hits += run(&schedule.order);
        identity_hits += run(&identity);
    }
    assert!(
        dooq_hits >= identity_hits,
        "mean hit rate: scheduler {:.4} vs identity {:.4}",
        dooq_hits / 20.0,
        identity_hits / 20.0
    );
}

#[test]
fn full_scale_dense_and_pruned_counts() {
    // the standard detection-transformer encoder population and its pruned
    // sizes at the studied keeping ratios
    let spec = WorkloadSpec {
        mode: WorkloadMode::DenseEncoder,
        levels: WorkloadSpec::full_scale_levels(),
        channels: 32,
        heads: 4,
        points: 4,
        distribution: Distribution::Grid,
        offset_envelope: 0.02,
        seed: 1,
    };
    let (_, batch) = generate_workload(&spec).unwrap();
    assert_eq!(batch.len(), 20097);

    for (rho, expect) in [(0.5, 10049usize), (0.1, 2010)] {
        let spec = WorkloadSpec { mode: WorkloadMode::SparseEncoder { rho }, ..spec.clone() };
        let (_, pruned) = generate_workload(&spec).unwrap();
        assert_eq!(pruned.len(), expect, "keeping ratio {rho}");
    }
}
