//! Cross-module verification: independent oracles for the attention
//! equation, the cache simulators, the scheduler, and the quantized path.
//!
//! Every oracle here is coded against the definitions directly and shares no
//! kernel helpers with the implementation it checks.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use deformsim::attention::{
    msdeformattn_fused, msdeformattn_reference, AttentionOutput, FeaturePyramid, ProjectionWeights,
    PyramidDims, QueryBatch,
};
use deformsim::cache::{
    footprints, simulate_baseline_recorded, t_stall_analytic, CacheGeometry, CachePolicy, Footprint,
    LineId, TimingConfig,
};
use deformsim::fixedpoint::{
    exp_reduced, msdeformattn_fused_quantized, quantize, quantized_softmax, PrecisionPlan,
    QuantizerConfig, SaturationCounters, ScalePolicy,
};
use deformsim::scheduler::{dooq_schedule, SchedulerConfig};
use deformsim::workload::{random_instance, InstanceSpec};

use crate::Result;

/// Options for the verification suites.
#[derive(Debug, Clone, Copy)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Random kernel instances for the fused/reference suite.
    pub instances: usize,
    /// Random traces for the cache-oracle suite.
    pub traces: usize,
    /// Planted-cluster instances for the scheduler suite.
    pub cluster_instances: usize,
    /// Seeds for the quantized-error ensemble.
    pub quant_seeds: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self { seed: 0, instances: 100, traces: 100, cluster_instances: 50, quant_seeds: 100 }
    }
}

/// One suite's verdict with a human-readable metric line.
#[derive(Debug, Clone)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct VerifySummary {
    pub suites: Vec<SuiteResult>,
}

impl VerifySummary {
    pub fn all_passed(&self) -> bool {
        self.suites.iter().all(|s| s.passed)
    }
}

/// Runs every suite at desk scale.
pub fn verify_kernels(opts: &VerifyOptions) -> Result<VerifySummary> {
    let suites = vec![
        fused_reference_suite(opts),
        quantized_suite(opts),
        cache_oracle_suite(opts),
        scheduler_suite(opts),
    ];
    Ok(VerifySummary { suites })
}

// ── Attention equation oracle ───────────────────────────────────────

/// Brute-force evaluation of the attention equation in `f64`: per-head
/// softmax without max subtraction, inline 2x2 interpolation with zero
/// padding, explicit two-stage projections.
pub fn eq1_oracle(pyramid: &FeaturePyramid, queries: &QueryBatch, weights: &ProjectionWeights) -> Vec<f64> {
    let d = weights.channels();
    let head_dim = weights.head_dim();
    let (mh, ll, kk) = (queries.heads(), queries.levels(), queries.points());
    let mut out = vec![0.0f64; queries.len() * d];
    for q in 0..queries.len() {
        let logits = queries.query_logits(q);
        for m in 0..mh {
            let head = &logits[m * ll * kk..(m + 1) * ll * kk];
            let exp_sum: f64 = head.iter().map(|&v| (v as f64).exp()).sum();
            let mut inner = vec![0.0f64; head_dim];
            for l in 0..ll {
                let map = pyramid.level(l);
                for k in 0..kk {
                    let attn = (head[l * kk + k] as f64).exp() / exp_sum;
                    let r = queries.ref_point(q);
                    let o = queries.offset(q, m, l, k);
                    let px = (r[0] as f64 + o[0] as f64) * (map.width() - 1) as f64;
                    let py = (r[1] as f64 + o[1] as f64) * (map.height() - 1) as f64;
                    let (x0, y0) = (px.floor(), py.floor());
                    let (fx, fy) = (px - x0, py - y0);
                    let mut sampled = vec![0.0f64; d];
                    for (dy, dx, w) in [
                        (0i64, 0i64, (1.0 - fx) * (1.0 - fy)),
                        (0, 1, fx * (1.0 - fy)),
                        (1, 0, (1.0 - fx) * fy),
                        (1, 1, fx * fy),
                    ] {
                        let (tx, ty) = (x0 as i64 + dx, y0 as i64 + dy);
                        if tx < 0 || ty < 0 || tx >= map.width() as i64 || ty >= map.height() as i64 {
                            continue;
                        }
                        for (s, &v) in sampled.iter_mut().zip(map.at(ty as usize, tx as usize)) {
                            *s += w * v as f64;
                        }
                    }
                    let wv = weights.value_proj(m);
                    for row in 0..head_dim {
                        let mut acc = 0.0f64;
                        for c in 0..d {
                            acc += wv[row * d + c] as f64 * sampled[c];
                        }
                        inner[row] += attn * acc;
                    }
                }
            }
            let wo = weights.output_proj(m);
            for row in 0..d {
                let mut acc = 0.0f64;
                for j in 0..head_dim {
                    acc += wo[row * head_dim + j] as f64 * inner[j];
                }
                out[q * d + row] += acc;
            }
        }
    }
    out
}

fn linf_rel(a: &AttentionOutput, reference: &[f64]) -> f64 {
    let scale = reference.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-12);
    a.data()
        .iter()
        .zip(reference)
        .map(|(&x, &y)| (x as f64 - y).abs() / scale)
        .fold(0.0, f64::max)
}

fn linf_rel_outputs(a: &AttentionOutput, b: &AttentionOutput) -> f64 {
    let scale = b.data().iter().map(|&v| (v as f64).abs()).fold(0.0, f64::max).max(1e-12);
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).abs() / scale)
        .fold(0.0, f64::max)
}

/// Random instance shapes within the desk-scale envelope
/// (`D <= 32, M <= 4, L <= 4, K <= 4, n <= 64`).
fn random_shape(rng: &mut StdRng) -> InstanceSpec {
    let heads = [1usize, 2, 4][rng.gen_range(0..3)];
    let head_dim = rng.gen_range(1..=(32 / heads).min(8));
    InstanceSpec {
        channels: heads * head_dim,
        heads,
        levels: rng.gen_range(1..=4),
        points: rng.gen_range(1..=4),
        queries: rng.gen_range(1..=64),
        base_extent: rng.gen_range(4..=9),
        offset_envelope: 0.05,
    }
}

/// Fused vs reference vs the brute-force equation oracle.
pub fn fused_reference_suite(opts: &VerifyOptions) -> SuiteResult {
    let mut rng = StdRng::seed_from_u64(opts.seed.wrapping_add(101));
    let mut max_fused = 0.0f64;
    let mut max_reference = 0.0f64;
    for i in 0..opts.instances {
        let spec = random_shape(&mut rng);
        let (pyramid, batch, weights) = random_instance(&spec, opts.seed.wrapping_add(i as u64));
        let reference = match msdeformattn_reference(&pyramid, &batch, &weights) {
            Ok(r) => r,
            Err(e) => {
                return SuiteResult {
                    name: "fused-vs-reference",
                    passed: false,
                    detail: format!("reference kernel failed: {e}"),
                }
            }
        };
        let fused = match msdeformattn_fused(&pyramid, &batch, &weights) {
            Ok(f) => f,
            Err(e) => {
                return SuiteResult {
                    name: "fused-vs-reference",
                    passed: false,
                    detail: format!("fused kernel failed: {e}"),
                }
            }
        };
        let oracle = eq1_oracle(&pyramid, &batch, &weights);
        max_fused = max_fused.max(linf_rel_outputs(&fused, &reference));
        max_reference = max_reference.max(linf_rel(&reference, &oracle));
    }
    let passed = max_fused <= 1e-5 && max_reference <= 1e-6;
    SuiteResult {
        name: "fused-vs-reference",
        passed,
        detail: format!(
            "{} instances: max fused-vs-reference {:.3e} (<= 1e-5), max reference-vs-oracle {:.3e} (<= 1e-6)",
            opts.instances, max_fused, max_reference
        ),
    }
}

// ── Quantized path ──────────────────────────────────────────────────

/// Quantized-vs-float error ensemble, the Padé sweep, per-head softmax sums,
/// and the adversarial saturation probe.
pub fn quantized_suite(opts: &VerifyOptions) -> SuiteResult {
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    let mut per_seed_max = 0.0f64;
    for i in 0..opts.quant_seeds {
        let spec = InstanceSpec {
            channels: 8,
            heads: 2,
            levels: 2,
            points: 2,
            queries: 64,
            base_extent: 8,
            offset_envelope: 0.03,
        };
        let (pyramid, batch, weights) = random_instance(&spec, opts.seed.wrapping_add(7919 * i as u64));
        let float = match msdeformattn_fused(&pyramid, &batch, &weights) {
            Ok(f) => f,
            Err(e) => {
                return SuiteResult { name: "quantized-vs-float", passed: false, detail: e.to_string() }
            }
        };
        let quant =
            match msdeformattn_fused_quantized(&pyramid, &batch, &weights, &QuantizerConfig::default()) {
                Ok(q) => q,
                Err(e) => {
                    return SuiteResult { name: "quantized-vs-float", passed: false, detail: e.to_string() }
                }
            };
        let seed_num: f64 = quant
            .output
            .data()
            .iter()
            .zip(float.data())
            .map(|(&a, &b)| ((a - b) as f64).powi(2))
            .sum();
        let seed_den: f64 = float.data().iter().map(|&b| (b as f64).powi(2)).sum();
        per_seed_max = per_seed_max.max((seed_num / seed_den.max(1e-30)).sqrt());
        num += seed_num;
        den += seed_den;
    }
    let pooled = (num / den.max(1e-30)).sqrt();

    // Padé exponential over the full pre-reduction domain
    let fmt = PrecisionPlan::default().accum_fmt_agg;
    let mut pade_max = 0.0f64;
    for i in 0..=10_000 {
        let x = -20.0 * i as f64 / 10_000.0;
        match exp_reduced(x, &fmt) {
            Ok(got) => pade_max = pade_max.max((got - x.exp()).abs() / x.exp()),
            Err(e) => return SuiteResult { name: "quantized-vs-float", passed: false, detail: e.to_string() },
        }
    }

    // per-head softmax sums
    let plan = PrecisionPlan::default();
    let mut rng = StdRng::seed_from_u64(opts.seed.wrapping_add(17));
    let mut sum_dev = 0.0f64;
    for _ in 0..200 {
        let logits: Vec<f32> = (0..4 * 4 * 4).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let q = match quantize(&logits, plan.act_fmt_agg, ScalePolicy::MaxAbs) {
            Ok(q) => q,
            Err(e) => return SuiteResult { name: "quantized-vs-float", passed: false, detail: e.to_string() },
        };
        let mut counters = SaturationCounters::default();
        let a = match quantized_softmax(&q.codes, q.scale, 4, 4, 4, &plan, &mut counters) {
            Ok(a) => a,
            Err(e) => return SuiteResult { name: "quantized-vs-float", passed: false, detail: e.to_string() },
        };
        let weights = a.dequantize();
        for m in 0..4 {
            let sum: f64 = weights[m * 16..(m + 1) * 16].iter().sum();
            sum_dev = sum_dev.max((sum - 1.0).abs());
        }
    }

    // adversarial saturation probe: full-scale operands must clamp (never
    // wrap) and be flagged in the counters
    let (saturations, clamped) = match saturation_probe() {
        Ok(pair) => pair,
        Err(e) => return SuiteResult { name: "quantized-vs-float", passed: false, detail: e.to_string() },
    };

    let passed =
        pooled <= 1e-2 && pade_max <= 3e-4 && sum_dev <= 1.0 / 256.0 && saturations > 0 && clamped;
    SuiteResult {
        name: "quantized-vs-float",
        passed,
        detail: format!(
            "{} seeds: pooled L2 {:.3e} (<= 1e-2, per-seed max {:.3e}); pade max rel {:.3e} (<= 3e-4); \
             softmax sum dev {:.3e} (<= 2^-8); saturation probe: {saturations} events, clamped = {clamped}",
            opts.quant_seeds, pooled, per_seed_max, pade_max, sum_dev
        ),
    }
}

/// Drives every projection accumulator to its format extreme; returns the
/// saturation count and whether outputs stayed within the clamp bound.
fn saturation_probe() -> Result<(u64, bool)> {
    use deformsim::attention::{fold_projections, FeatureMap, FeaturePyramid, ProjectionWeights};
    let d = 32;
    let heads = 2;
    let data: Vec<f32> = (0..8 * 8 * d).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
    let pyramid = FeaturePyramid::new(vec![FeatureMap::new(8, 8, d, data)?])?;
    let samples = heads * 2;
    let batch = QueryBatch::new(
        vec![0],
        vec![[0.5, 0.5]],
        vec![[0.0, 0.0]; samples],
        vec![0.0; samples],
        heads,
        1,
        2,
    )?;
    let head_dim = d / heads;
    let value: Vec<f32> = (0..heads * head_dim * d).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
    let output: Vec<f32> = (0..heads * d * head_dim).map(|i| if i % 3 == 0 { 1.0 } else { -1.0 }).collect();
    let weights = fold_projections(&ProjectionWeights::new(d, heads, value, output)?);
    let run = msdeformattn_fused_quantized(&pyramid, &batch, &weights, &QuantizerConfig::default())?;
    let plan = PrecisionPlan::default();
    let bound = plan.accum_fmt_linear.max_code() as f64
        * run.scales.weights.iter().cloned().fold(0.0, f64::max)
        * run.scales.aggregates.iter().cloned().fold(0.0, f64::max)
        + 1.0;
    let clamped = run.output.data().iter().all(|&v| (v as f64).abs() <= bound);
    Ok((run.saturation.total(), clamped))
}

// ── Cache oracle ────────────────────────────────────────────────────

/// Dictionary-based direct-mapped reference: one map entry per set index.
pub fn map_cache_oracle(trace: &[Footprint], capacity: usize, dims: &PyramidDims) -> Vec<bool> {
    let mut slots: std::collections::HashMap<usize, usize> = std::collections::HashMap::new();
    let mut sequence = Vec::new();
    for fp in trace {
        for line in fp.lines() {
            let addr = line.flat(dims);
            let hit = slots.get(&(addr % capacity)) == Some(&addr);
            sequence.push(hit);
            if !hit {
                slots.insert(addr % capacity, addr);
            }
        }
    }
    sequence
}

fn random_trace(rng: &mut ChaCha8Rng, dims: &PyramidDims) -> Vec<Footprint> {
    (0..rng.gen_range(10..60))
        .map(|_| {
            let lines: Vec<LineId> = (0..rng.gen_range(1..10))
                .map(|_| {
                    let level = rng.gen_range(0..dims.levels.len());
                    let (h, w) = dims.levels[level];
                    LineId { level, y: rng.gen_range(0..h), x: rng.gen_range(0..w) }
                })
                .collect();
            Footprint::from_lines(lines)
        })
        .collect()
}

/// simulate_baseline vs the map oracle, access by access.
pub fn cache_oracle_suite(opts: &VerifyOptions) -> SuiteResult {
    let dims = PyramidDims { levels: vec![(12, 12), (6, 6)] };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(3));
    let timing = TimingConfig::new(4, 2, 1.21).expect("valid timing");
    let mut checked = 0usize;
    for t in 0..opts.traces {
        let capacity = [4usize, 8, 16, 32, 64][t % 5];
        let geometry = CacheGeometry::new(CachePolicy::DirectMapped, capacity, 8, 128).expect("valid geometry");
        let trace = random_trace(&mut rng, &dims);
        let (report, sequence) = match simulate_baseline_recorded(&trace, &geometry, &timing, &dims) {
            Ok(r) => r,
            Err(e) => return SuiteResult { name: "cache-vs-oracle", passed: false, detail: e.to_string() },
        };
        let oracle = map_cache_oracle(&trace, capacity, &dims);
        if sequence != oracle {
            return SuiteResult {
                name: "cache-vs-oracle",
                passed: false,
                detail: format!("trace {t}: hit/miss sequence diverges from the map oracle"),
            };
        }
        let oracle_hits = oracle.iter().filter(|&&h| h).count() as u64;
        if report.hits != oracle_hits {
            return SuiteResult {
                name: "cache-vs-oracle",
                passed: false,
                detail: format!("trace {t}: hit counters diverge"),
            };
        }
        checked += sequence.len();
    }
    SuiteResult {
        name: "cache-vs-oracle",
        passed: true,
        detail: format!("{} traces, {checked} accesses match access-by-access", opts.traces),
    }
}

// ── Scheduler vs brute force ────────────────────────────────────────

/// A planted-cluster batch: tight clusters far apart, queries assigned to
/// clusters round-robin, so every cluster is populated and consecutive
/// queries in the generated (identity) order always hop clusters - the
/// scattered arrival pattern the scheduler is supposed to repair.
#[allow(clippy::too_many_arguments)]
pub fn planted_cluster_batch(
    n: usize,
    clusters: usize,
    spread: f64,
    heads: usize,
    levels: usize,
    points: usize,
    envelope: f32,
    seed: u64,
) -> QueryBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // centers kept at least 0.4 apart in L1 by rejection
    let mut centers: Vec<[f64; 2]> = Vec::new();
    while centers.len() < clusters {
        let c = [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)];
        if centers.iter().all(|o| (o[0] - c[0]).abs() + (o[1] - c[1]).abs() >= 0.4) {
            centers.push(c);
        }
    }
    let refs: Vec<[f32; 2]> = (0..n)
        .map(|i| {
            let c = centers[i % clusters];
            [
                (c[0] + rng.gen_range(-spread..spread)).clamp(0.0, 1.0) as f32,
                (c[1] + rng.gen_range(-spread..spread)).clamp(0.0, 1.0) as f32,
            ]
        })
        .collect();
    let samples = heads * levels * points;
    QueryBatch::new(
        (0..n as u64).collect(),
        refs,
        (0..n * samples).map(|_| [rng.gen_range(-envelope..=envelope), rng.gen_range(-envelope..=envelope)]).collect(),
        vec![0.0; n * samples],
        heads,
        levels,
        points,
    )
    .expect("valid planted batch")
}

/// Exhaustive minimum of the analytic stall over all `n!` orders, from a
/// precomputed pairwise new-line cost matrix.
pub fn optimal_stall_exhaustive(footprints: &[Footprint], t_fetch: u64) -> u64 {
    let n = footprints.len();
    let sets: Vec<std::collections::HashSet<LineId>> = footprints.iter().map(|f| f.as_set()).collect();
    let mut cost = vec![vec![0u64; n]; n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                cost[i][j] =
                    t_fetch * footprints[j].lines().iter().filter(|l| !sets[i].contains(l)).count() as u64;
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut best = u64::MAX;
    permute(&mut order, 0, &cost, &mut best);
    best
}

fn permute(order: &mut Vec<usize>, k: usize, cost: &[Vec<u64>], best: &mut u64) {
    let n = order.len();
    if k == n {
        let total: u64 = order.windows(2).map(|w| cost[w[0]][w[1]]).sum();
        *best = (*best).min(total);
        return;
    }
    for i in k..n {
        order.swap(k, i);
        permute(order, k + 1, cost, best);
        order.swap(k, i);
    }
}

/// Metrics of the scheduler-vs-brute-force comparison.
#[derive(Debug, Clone, Copy)]
pub struct SchedulerGap {
    pub instances: usize,
    pub dooq_never_worse_than_identity: bool,
    pub mean_ratio_vs_optimal: f64,
    pub max_ratio_vs_optimal: f64,
}

/// Runs the planted-cluster brute-force comparison at `n = 8, w_d = 8`.
pub fn scheduler_gap(opts: &VerifyOptions) -> SchedulerGap {
    let dims = PyramidDims { levels: vec![(48, 48), (24, 24)] };
    let timing = TimingConfig::new(1, 0, 1.21).expect("valid timing");
    let config = SchedulerConfig::new(8, 8, 32);
    let mut never_worse = true;
    let mut ratio_sum = 0.0f64;
    let mut ratio_max = 0.0f64;
    let mut ratio_count = 0usize;
    for i in 0..opts.cluster_instances {
        let batch = planted_cluster_batch(8, 3, 0.015, 1, 2, 2, 0.02, opts.seed.wrapping_add(31 * i as u64));
        let fps = footprints(&batch, &dims);
        let schedule = dooq_schedule(&batch, &config);
        let identity: Vec<usize> = (0..8).collect();
        let dooq_stall = t_stall_analytic(&schedule.order, &fps, &timing);
        let identity_stall = t_stall_analytic(&identity, &fps, &timing);
        if dooq_stall > identity_stall {
            never_worse = false;
        }
        let optimal = optimal_stall_exhaustive(&fps, timing.t_fetch_per_line);
        if optimal > 0 {
            let ratio = dooq_stall as f64 / optimal as f64;
            ratio_sum += ratio;
            ratio_max = ratio_max.max(ratio);
            ratio_count += 1;
        }
    }
    SchedulerGap {
        instances: opts.cluster_instances,
        dooq_never_worse_than_identity: never_worse,
        mean_ratio_vs_optimal: if ratio_count == 0 { 1.0 } else { ratio_sum / ratio_count as f64 },
        max_ratio_vs_optimal: ratio_max,
    }
}

pub fn scheduler_suite(opts: &VerifyOptions) -> SuiteResult {
    let gap = scheduler_gap(opts);
    let passed = gap.dooq_never_worse_than_identity && gap.mean_ratio_vs_optimal <= 1.5;
    SuiteResult {
        name: "dooq-vs-brute-force",
        passed,
        detail: format!(
            "{} instances: never worse than identity = {}, mean ratio vs optimal {:.4} (<= 1.5), max {:.4}",
            gap.instances, gap.dooq_never_worse_than_identity, gap.mean_ratio_vs_optimal, gap.max_ratio_vs_optimal
        ),
    }
}
