//! Workload construction: synthetic pyramids and query batches, top-k query
//! pruning, the gather/scatter index remap, and burst-friendliness stats.
//!
//! Generators are fully deterministic given the spec's seed. Query ids equal
//! the query's position in the originally generated batch, so "original
//! semantic order" and "ascending id" coincide for generated workloads.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    AttentionOutput, FeatureMap, FeaturePyramid, ProjectionWeights, PyramidDims, QueryBatch,
};
use crate::cache::Footprint;
use crate::{Error, Result};

// ── Specs ───────────────────────────────────────────────────────────

/// What population of queries to generate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum WorkloadMode {
    /// One query per spatial location of every level.
    DenseEncoder,
    /// Dense encoder pruned to the top `ceil(n * rho)` by seeded scores.
    SparseEncoder { rho: f64 },
    /// `n_d` detection queries placed by the spatial distribution.
    Decoder { n_d: usize },
}

/// Spatial distribution of non-dense reference points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Distribution {
    Uniform,
    /// `clusters` Gaussian clusters of standard deviation `spread`
    /// (normalized units); queries draw their cluster i.i.d., so the
    /// generated order is spatially scattered.
    Clustered { clusters: usize, spread: f64 },
    /// Level-0 grid points in row-major order.
    Grid,
}

/// Full description of a synthetic workload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub mode: WorkloadMode,
    /// `(height, width)` per level.
    pub levels: Vec<(usize, usize)>,
    pub channels: usize,
    pub heads: usize,
    pub points: usize,
    pub distribution: Distribution,
    /// Max offset magnitude in normalized units.
    pub offset_envelope: f32,
    pub seed: u64,
}

impl WorkloadSpec {
    /// Desk-scale defaults: a 4-level pyramid small enough for brute-force
    /// oracles but shaped like a detection pyramid.
    pub fn desk_scale() -> Self {
        Self {
            mode: WorkloadMode::DenseEncoder,
            levels: vec![(64, 64), (32, 32), (16, 16), (8, 8)],
            channels: 32,
            heads: 4,
            points: 4,
            distribution: Distribution::Grid,
            offset_envelope: 0.02,
            seed: 0,
        }
    }

    /// Level shapes reproducing the standard detection-transformer encoder
    /// query count of 20097 (sum of H*W over the four strides).
    pub fn full_scale_levels() -> Vec<(usize, usize)> {
        vec![(100, 151), (50, 76), (25, 38), (13, 19)]
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::Empty { context: "workload level list" });
        }
        if self.levels.iter().any(|&(h, w)| h == 0 || w == 0) {
            return Err(Error::Config("workload level dims must be positive".into()));
        }
        if self.channels == 0 || self.heads == 0 || self.points == 0 {
            return Err(Error::Config("channels, heads and points must be positive".into()));
        }
        if !self.channels.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "channels {} must be a multiple of heads {}",
                self.channels, self.heads
            )));
        }
        match self.mode {
            WorkloadMode::SparseEncoder { rho } => {
                if !(rho > 0.0 && rho <= 1.0) {
                    return Err(Error::Config(format!("keeping ratio must be in (0, 1], got {rho}")));
                }
            }
            WorkloadMode::Decoder { n_d } => {
                if n_d == 0 {
                    return Err(Error::Config("decoder query count must be >= 1".into()));
                }
            }
            WorkloadMode::DenseEncoder => {}
        }
        if let Distribution::Clustered { clusters, spread } = self.distribution {
            if clusters == 0 || spread <= 0.0 {
                return Err(Error::Config("clustered distribution needs clusters >= 1 and spread > 0".into()));
            }
        }
        Ok(())
    }

    pub fn dims(&self) -> PyramidDims {
        PyramidDims { levels: self.levels.clone() }
    }

    /// Dense query count: one per spatial location of every level.
    pub fn dense_query_count(&self) -> usize {
        self.levels.iter().map(|&(h, w)| h * w).sum()
    }
}

// ── Index remap ─────────────────────────────────────────────────────

/// Gather/scatter bookkeeping for a pruned batch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexRemap {
    /// Surviving original ids, in original (semantic) order.
    pub kept_ids: Vec<u64>,
    /// Original id -> packed position.
    pub forward: HashMap<u64, usize>,
    /// Packed position -> original id.
    pub inverse: Vec<u64>,
}

impl IndexRemap {
    pub fn identity(ids: &[u64]) -> Self {
        Self {
            kept_ids: ids.to_vec(),
            forward: ids.iter().enumerate().map(|(i, &id)| (id, i)).collect(),
            inverse: ids.to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.inverse.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inverse.is_empty()
    }

    /// `forward(inverse(p)) == p` for every packed position.
    pub fn is_consistent(&self) -> bool {
        self.inverse.len() == self.forward.len()
            && self.kept_ids.len() == self.inverse.len()
            && self.inverse.iter().enumerate().all(|(p, id)| self.forward.get(id) == Some(&p))
    }
}

// ── Generation ──────────────────────────────────────────────────────

fn grid_point(x: usize, y: usize, w: usize, h: usize) -> [f32; 2] {
    let u = if w > 1 { x as f32 / (w - 1) as f32 } else { 0.5 };
    let v = if h > 1 { y as f32 / (h - 1) as f32 } else { 0.5 };
    [u, v]
}

fn draw_ref_points(spec: &WorkloadSpec, n: usize, rng: &mut ChaCha8Rng) -> Vec<[f32; 2]> {
    match spec.distribution {
        Distribution::Uniform => (0..n).map(|_| [rng.gen(), rng.gen()]).collect(),
        Distribution::Grid => {
            let (h, w) = spec.levels[0];
            (0..n).map(|i| grid_point(i % w, (i / w) % h, w, h)).collect()
        }
        Distribution::Clustered { clusters, spread } => {
            let centers: Vec<[f64; 2]> = (0..clusters)
                .map(|_| [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)])
                .collect();
            (0..n)
                .map(|_| {
                    let c = centers[rng.gen_range(0..clusters)];
                    // Box-Muller pair for an isotropic Gaussian
                    let u1: f64 = rng.gen_range(1e-12..1.0);
                    let u2: f64 = rng.gen();
                    let r = (-2.0 * u1.ln()).sqrt() * spread;
                    let (s, co) = (std::f64::consts::TAU * u2).sin_cos();
                    [
                        (c[0] + r * co).clamp(0.0, 1.0) as f32,
                        (c[1] + r * s).clamp(0.0, 1.0) as f32,
                    ]
                })
                .collect()
        }
    }
}

fn build_batch(spec: &WorkloadSpec, ref_points: Vec<[f32; 2]>, rng: &mut ChaCha8Rng) -> Result<QueryBatch> {
    let n = ref_points.len();
    let samples = spec.heads * spec.levels.len() * spec.points;
    let env = spec.offset_envelope;
    let offsets: Vec<[f32; 2]> = (0..n * samples)
        .map(|_| [rng.gen_range(-env..=env), rng.gen_range(-env..=env)])
        .collect();
    let logits: Vec<f32> = (0..n * samples).map(|_| rng.gen_range(-1.0..1.0)).collect();
    QueryBatch::new(
        (0..n as u64).collect(),
        ref_points,
        offsets,
        logits,
        spec.heads,
        spec.levels.len(),
        spec.points,
    )
}

/// Generates the seeded pyramid and query batch described by `spec`.
///
/// Dense encoder mode places one query per spatial location of every level;
/// sparse encoder mode prunes that population to `ceil(n * rho)` by seeded
/// random scores (the simulator cares about the induced scatter, not score
/// semantics); decoder mode draws `n_d` queries from the distribution.
pub fn generate_workload(spec: &WorkloadSpec) -> Result<(FeaturePyramid, QueryBatch)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let levels = spec
        .levels
        .iter()
        .map(|&(h, w)| {
            let data: Vec<f32> = (0..h * w * spec.channels).map(|_| rng.gen_range(-1.0..1.0)).collect();
            FeatureMap::new(h, w, spec.channels, data)
        })
        .collect::<Result<Vec<_>>>()?;
    let pyramid = FeaturePyramid::new(levels)?;

    let batch = match spec.mode {
        WorkloadMode::DenseEncoder | WorkloadMode::SparseEncoder { .. } => {
            let mut refs = Vec::with_capacity(spec.dense_query_count());
            for &(h, w) in &spec.levels {
                for y in 0..h {
                    for x in 0..w {
                        refs.push(grid_point(x, y, w, h));
                    }
                }
            }
            build_batch(spec, refs, &mut rng)?
        }
        WorkloadMode::Decoder { n_d } => {
            let refs = draw_ref_points(spec, n_d, &mut rng);
            build_batch(spec, refs, &mut rng)?
        }
    };

    if let WorkloadMode::SparseEncoder { rho } = spec.mode {
        let scores: Vec<f32> = (0..batch.len()).map(|_| rng.gen()).collect();
        let keep = (batch.len() as f64 * rho).ceil() as usize;
        let (pruned, _) = prune_topk(&batch, &scores, keep)?;
        return Ok((pyramid, pruned));
    }
    Ok((pyramid, batch))
}

/// Seeded random scores for top-k pruning, drawn independently of the
/// workload stream so nested keep counts select nested query sets.
pub fn random_scores(n: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5c0e_55c0_e55c_0e55);
    (0..n).map(|_| rng.gen()).collect()
}

// ── Pruning and restore ─────────────────────────────────────────────

/// Keeps the `keep` highest-scoring queries (ties to the lower id). The
/// packed batch is ordered by descending score; the remap records both
/// directions.
pub fn prune_topk(queries: &QueryBatch, scores: &[f32], keep: usize) -> Result<(QueryBatch, IndexRemap)> {
    if keep == 0 {
        return Err(Error::Empty { context: "pruned workload (keep = 0)" });
    }
    if keep > queries.len() {
        return Err(Error::Config(format!(
            "cannot keep {keep} of {} queries",
            queries.len()
        )));
    }
    if scores.len() != queries.len() {
        return Err(Error::Config(format!(
            "score count {} != query count {}",
            scores.len(),
            queries.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite { context: "pruning score" });
    }

    let mut by_score: Vec<usize> = (0..queries.len()).collect();
    by_score.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("scores are finite")
            .then(queries.id(a).cmp(&queries.id(b)))
    });
    let packed_positions: Vec<usize> = by_score[..keep].to_vec();

    let packed = queries.select(&packed_positions);
    let inverse: Vec<u64> = packed_positions.iter().map(|&p| queries.id(p)).collect();
    let forward: HashMap<u64, usize> = inverse.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let mut kept_ids = inverse.clone();
    kept_ids.sort_by_key(|&id| queries.ids().iter().position(|&x| x == id).expect("selected"));
    Ok((packed, IndexRemap { kept_ids, forward, inverse }))
}

/// Re-sorts attention outputs into original semantic order (the order of
/// `remap.kept_ids`). Pruned positions are absent; unknown ids are data
/// corruption.
pub fn scatter_restore(outputs: &AttentionOutput, remap: &IndexRemap) -> Result<AttentionOutput> {
    let mut by_id: HashMap<u64, usize> = HashMap::with_capacity(outputs.len());
    for (i, &id) in outputs.ids().iter().enumerate() {
        if !remap.forward.contains_key(&id) {
            return Err(Error::UnknownId(id));
        }
        by_id.insert(id, i);
    }
    let d = outputs.channels();
    let mut ids = Vec::with_capacity(remap.kept_ids.len());
    let mut data = Vec::with_capacity(remap.kept_ids.len() * d);
    for &id in &remap.kept_ids {
        let &i = by_id.get(&id).ok_or(Error::UnknownId(id))?;
        ids.push(id);
        data.extend_from_slice(outputs.vector(i));
    }
    AttentionOutput::new(d, ids, data)
}

// ── Burst statistics ────────────────────────────────────────────────

/// Contiguous-address run statistics of a packed access stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BurstStats {
    pub mean_run: f64,
    pub runs: usize,
}

/// Run-length statistics of the packed external access stream: for each
/// packed query in order, its footprint lines sorted by flat address, with a
/// run continuing while consecutive addresses increase by exactly one.
///
/// `footprints` is indexed by original id (generated workloads assign ids by
/// original position).
pub fn burst_length_stats(remap: &IndexRemap, footprints: &[Footprint], dims: &PyramidDims) -> BurstStats {
    let mut stream = Vec::new();
    for &id in &remap.inverse {
        let mut addrs: Vec<usize> =
            footprints[id as usize].lines().iter().map(|l| l.flat(dims)).collect();
        addrs.sort_unstable();
        stream.extend(addrs);
    }
    if stream.is_empty() {
        return BurstStats { mean_run: 0.0, runs: 0 };
    }
    let mut runs = 1usize;
    for pair in stream.windows(2) {
        if pair[1] != pair[0] + 1 {
            runs += 1;
        }
    }
    BurstStats { mean_run: stream.len() as f64 / runs as f64, runs }
}

// ── Random kernel-verification instances ────────────────────────────

/// Shape of a small random instance for kernel verification.
#[derive(Debug, Clone)]
pub struct InstanceSpec {
    pub channels: usize,
    pub heads: usize,
    pub levels: usize,
    pub points: usize,
    pub queries: usize,
    /// Spatial size of the coarsest level; finer levels double it.
    pub base_extent: usize,
    pub offset_envelope: f32,
}

impl Default for InstanceSpec {
    fn default() -> Self {
        Self { channels: 8, heads: 2, levels: 2, points: 2, queries: 4, base_extent: 6, offset_envelope: 0.1 }
    }
}

/// Seeded random instance: pyramid and projection weights uniform in
/// `[-1, 1]`, reference points uniform in the unit square, folded weights
/// populated.
pub fn random_instance(spec: &InstanceSpec, seed: u64) -> (FeaturePyramid, QueryBatch, ProjectionWeights) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(1));
    let d = spec.channels;
    let levels = (0..spec.levels)
        .map(|l| {
            let extent = spec.base_extent << (spec.levels - 1 - l).min(4);
            let data: Vec<f32> = (0..extent * extent * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            FeatureMap::new(extent, extent, d, data).expect("valid dims")
        })
        .collect();
    let pyramid = FeaturePyramid::new(levels).expect("valid pyramid");

    let samples = spec.heads * spec.levels * spec.points;
    let env = spec.offset_envelope;
    let batch = QueryBatch::new(
        (0..spec.queries as u64).collect(),
        (0..spec.queries).map(|_| [rng.gen(), rng.gen()]).collect(),
        (0..spec.queries * samples).map(|_| [rng.gen_range(-env..=env), rng.gen_range(-env..=env)]).collect(),
        (0..spec.queries * samples).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        spec.heads,
        spec.levels,
        spec.points,
    )
    .expect("valid batch");

    let head_dim = d / spec.heads;
    let value: Vec<f32> = (0..spec.heads * head_dim * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let output: Vec<f32> = (0..spec.heads * d * head_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let weights = crate::attention::fold_projections(
        &ProjectionWeights::new(d, spec.heads, value, output).expect("valid weights"),
    );
    (pyramid, batch, weights)
}
