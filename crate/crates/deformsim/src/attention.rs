//! Multi-scale deformable attention: reference (two-stage) and fused
//! (single-pass, folded-projection) floating-point kernels.
//!
//! Each query samples `K` fractional points per head per pyramid level,
//! weights them with a per-head softmax over the `L*K` sampling axes, and
//! projects the aggregate back to `D` channels. Storage is `f32`;
//! accumulation is double-width (`f64`) so the fused and unfolded paths agree
//! to tight tolerances.
//!
//! Coordinate convention: a normalized reference point `(u, v)` in `[0,1]^2`
//! maps to pixel `(u*(W-1), v*(H-1))` on a level of width `W` and height `H`.
//! Sampling offsets are stored in the same normalized units and scaled per
//! level identically. Bilinear taps outside the map contribute zero
//! (grid-sample zero-padding semantics).

use crate::{Error, Result};

// ── Domain types ────────────────────────────────────────────────────

/// One pyramid level: an `H x W` grid of `D`-channel feature vectors.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl FeatureMap {
    /// Builds a map from row-major data laid out as `(y*W + x)*D + c`.
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Config(format!(
                "feature map dims must be positive, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::Config(format!(
                "feature map data length {} != {}x{}x{}",
                data.len(),
                height,
                width,
                channels
            )));
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Feature vector at integer grid point `(y, x)`.
    pub fn at(&self, y: usize, x: usize) -> &[f32] {
        let base = (y * self.width + x) * self.channels;
        &self.data[base..base + self.channels]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }
}

/// `L` multi-resolution feature maps sharing one channel count.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    levels: Vec<FeatureMap>,
}

impl FeaturePyramid {
    pub fn new(levels: Vec<FeatureMap>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::Empty { context: "feature pyramid" });
        }
        let channels = levels[0].channels();
        if levels.iter().any(|m| m.channels() != channels) {
            return Err(Error::Config("pyramid levels disagree on channel count".into()));
        }
        Ok(Self { levels })
    }

    pub fn levels(&self) -> &[FeatureMap] {
        &self.levels
    }

    pub fn level(&self, l: usize) -> &FeatureMap {
        &self.levels[l]
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn channels(&self) -> usize {
        self.levels[0].channels()
    }

    /// Spatial dimensions only, for footprint and prefetch computations.
    pub fn dims(&self) -> PyramidDims {
        PyramidDims {
            levels: self.levels.iter().map(|m| (m.height(), m.width())).collect(),
        }
    }
}

/// `(height, width)` per level, detached from feature data.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct PyramidDims {
    pub levels: Vec<(usize, usize)>,
}

impl PyramidDims {
    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    /// Total number of spatial locations (cache lines) across levels.
    pub fn total_lines(&self) -> usize {
        self.levels.iter().map(|&(h, w)| h * w).sum()
    }

    /// Start of a level's range in the flat line address space.
    pub fn line_base(&self, level: usize) -> usize {
        self.levels[..level].iter().map(|&(h, w)| h * w).sum()
    }
}

/// A batch of queries: reference points, sampling offsets and attention
/// logits, indexed `((q*M + m)*L + l)*K + k` on the sampling axes.
#[derive(Debug, Clone)]
pub struct QueryBatch {
    ids: Vec<u64>,
    ref_points: Vec<[f32; 2]>,
    offsets: Vec<[f32; 2]>,
    logits: Vec<f32>,
    heads: usize,
    levels: usize,
    points: usize,
}

impl QueryBatch {
    pub fn new(
        ids: Vec<u64>,
        ref_points: Vec<[f32; 2]>,
        offsets: Vec<[f32; 2]>,
        logits: Vec<f32>,
        heads: usize,
        levels: usize,
        points: usize,
    ) -> Result<Self> {
        let n = ids.len();
        if ref_points.len() != n {
            return Err(Error::Config(format!(
                "ref point count {} != query count {n}",
                ref_points.len()
            )));
        }
        let samples = heads * levels * points;
        if offsets.len() != n * samples || logits.len() != n * samples {
            return Err(Error::Config(format!(
                "expected {} offsets/logits per query ({} queries), got {}/{}",
                samples,
                n,
                offsets.len(),
                logits.len()
            )));
        }
        let mut sorted = ids.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != n {
            return Err(Error::Config("query ids must be unique within a batch".into()));
        }
        for p in &ref_points {
            if !(0.0..=1.0).contains(&p[0]) || !(0.0..=1.0).contains(&p[1]) {
                return Err(Error::Config(format!(
                    "reference point ({}, {}) outside [0,1]^2",
                    p[0], p[1]
                )));
            }
        }
        Ok(Self { ids, ref_points, offsets, logits, heads, levels, points })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn points(&self) -> usize {
        self.points
    }

    pub fn id(&self, q: usize) -> u64 {
        self.ids[q]
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn ref_point(&self, q: usize) -> [f32; 2] {
        self.ref_points[q]
    }

    pub fn ref_points(&self) -> &[[f32; 2]] {
        &self.ref_points
    }

    fn sample_index(&self, q: usize, m: usize, l: usize, k: usize) -> usize {
        ((q * self.heads + m) * self.levels + l) * self.points + k
    }

    pub fn offset(&self, q: usize, m: usize, l: usize, k: usize) -> [f32; 2] {
        self.offsets[self.sample_index(q, m, l, k)]
    }

    /// All `M*L*K` logits of one query.
    pub fn query_logits(&self, q: usize) -> &[f32] {
        let samples = self.heads * self.levels * self.points;
        &self.logits[q * samples..(q + 1) * samples]
    }

    pub fn logits(&self) -> &[f32] {
        &self.logits
    }

    pub fn offsets(&self) -> &[[f32; 2]] {
        &self.offsets
    }

    /// Selects a subset of queries (by position), preserving per-query data.
    pub fn select(&self, positions: &[usize]) -> QueryBatch {
        let samples = self.heads * self.levels * self.points;
        let mut ids = Vec::with_capacity(positions.len());
        let mut ref_points = Vec::with_capacity(positions.len());
        let mut offsets = Vec::with_capacity(positions.len() * samples);
        let mut logits = Vec::with_capacity(positions.len() * samples);
        for &q in positions {
            ids.push(self.ids[q]);
            ref_points.push(self.ref_points[q]);
            offsets.extend_from_slice(&self.offsets[q * samples..(q + 1) * samples]);
            logits.extend_from_slice(&self.logits[q * samples..(q + 1) * samples]);
        }
        QueryBatch {
            ids,
            ref_points,
            offsets,
            logits,
            heads: self.heads,
            levels: self.levels,
            points: self.points,
        }
    }
}

/// Per-head value and output projections, optionally with the folded product.
///
/// Layouts are head-major row-major: `value_proj` holds `M` matrices of shape
/// `(D/M) x D`, `output_proj` holds `M` matrices `D x (D/M)`, and `folded`
/// (when present) `M` matrices `D x D`.
#[derive(Debug, Clone)]
pub struct ProjectionWeights {
    channels: usize,
    heads: usize,
    value_proj: Vec<f32>,
    output_proj: Vec<f32>,
    folded: Option<Vec<f32>>,
}

impl ProjectionWeights {
    pub fn new(
        channels: usize,
        heads: usize,
        value_proj: Vec<f32>,
        output_proj: Vec<f32>,
    ) -> Result<Self> {
        if heads == 0 || channels == 0 || !channels.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "channel count {channels} must be a positive multiple of head count {heads}"
            )));
        }
        let head_dim = channels / heads;
        if value_proj.len() != heads * head_dim * channels {
            return Err(Error::Config(format!(
                "value projection length {} != M*(D/M)*D = {}",
                value_proj.len(),
                heads * head_dim * channels
            )));
        }
        if output_proj.len() != heads * channels * head_dim {
            return Err(Error::Config(format!(
                "output projection length {} != M*D*(D/M) = {}",
                output_proj.len(),
                heads * channels * head_dim
            )));
        }
        Ok(Self { channels, heads, value_proj, output_proj, folded: None })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    /// `(D/M) x D` value projection of head `m`, row-major.
    pub fn value_proj(&self, m: usize) -> &[f32] {
        let size = self.head_dim() * self.channels;
        &self.value_proj[m * size..(m + 1) * size]
    }

    /// `D x (D/M)` output projection of head `m`, row-major.
    pub fn output_proj(&self, m: usize) -> &[f32] {
        let size = self.channels * self.head_dim();
        &self.output_proj[m * size..(m + 1) * size]
    }

    /// `D x D` folded projection of head `m`, if populated.
    pub fn folded(&self, m: usize) -> Option<&[f32]> {
        let size = self.channels * self.channels;
        self.folded.as_ref().map(|f| &f[m * size..(m + 1) * size])
    }

    /// Replaces the folded matrices (head-major `M` blocks of `D x D`).
    pub fn with_folded(self, folded: Vec<f32>) -> Result<Self> {
        if folded.len() != self.heads * self.channels * self.channels {
            return Err(Error::Config(format!(
                "folded length {} != M*D*D = {}",
                folded.len(),
                self.heads * self.channels * self.channels
            )));
        }
        Ok(Self { folded: Some(folded), ..self })
    }

    pub fn has_folded(&self) -> bool {
        self.folded.is_some()
    }
}

/// Kernel outputs: one `D`-vector per query, tagged with the query's id.
///
/// Output order is the kernel's evaluation order; ids allow restoring the
/// semantic order downstream.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    channels: usize,
    ids: Vec<u64>,
    data: Vec<f32>,
}

impl AttentionOutput {
    pub fn new(channels: usize, ids: Vec<u64>, data: Vec<f32>) -> Result<Self> {
        if data.len() != ids.len() * channels {
            return Err(Error::Config(format!(
                "output data length {} != {} queries x {} channels",
                data.len(),
                ids.len(),
                channels
            )));
        }
        Ok(Self { channels, ids, data })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn vector(&self, i: usize) -> &[f32] {
        &self.data[i * self.channels..(i + 1) * self.channels]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Output vector for a given query id, if present.
    pub fn by_id(&self, id: u64) -> Option<&[f32]> {
        self.ids.iter().position(|&x| x == id).map(|i| self.vector(i))
    }
}

// ── Operations ──────────────────────────────────────────────────────

/// 2x2 bilinear sample at fractional pixel coordinate `(x, y)`.
///
/// Taps outside `[0, W-1] x [0, H-1]` contribute a zero vector. Rejects
/// non-finite coordinates.
pub fn bilinear_sample(map: &FeatureMap, x: f64, y: f64) -> Result<Vec<f32>> {
    if !x.is_finite() || !y.is_finite() {
        return Err(Error::NonFinite { context: "bilinear sample coordinate" });
    }
    let mut acc = vec![0.0f64; map.channels()];
    bilinear_accumulate(map, x, y, 1.0, &mut acc);
    Ok(acc.into_iter().map(|v| v as f32).collect())
}

/// Accumulates `weight * bilinear(map, x, y)` into `acc` (double-width).
pub(crate) fn bilinear_accumulate(map: &FeatureMap, x: f64, y: f64, weight: f64, acc: &mut [f64]) {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let (x0, y0) = (x0 as i64, y0 as i64);
    // (tap offset, tap weight); weights always sum to 1.
    let taps = [
        (x0, y0, (1.0 - fx) * (1.0 - fy)),
        (x0 + 1, y0, fx * (1.0 - fy)),
        (x0, y0 + 1, (1.0 - fx) * fy),
        (x0 + 1, y0 + 1, fx * fy),
    ];
    let (h, w) = (map.height() as i64, map.width() as i64);
    for (tx, ty, tw) in taps {
        if tx < 0 || ty < 0 || tx >= w || ty >= h {
            continue; // zero padding
        }
        let vec = map.at(ty as usize, tx as usize);
        let tw = tw * weight;
        for (a, &v) in acc.iter_mut().zip(vec) {
            *a += tw * v as f64;
        }
    }
}

/// Per-head softmax over the `L*K` sampling axes of one query's logits.
///
/// `logits` holds `M*L*K` finite values indexed `(m*L + l)*K + k`; the result
/// uses the same layout and sums to 1 per head. Stabilized by max-subtraction.
pub fn softmax_weights(logits: &[f32], heads: usize, levels: usize, points: usize) -> Result<Vec<f32>> {
    Ok(softmax_weights_f64(logits, heads, levels, points)?.into_iter().map(|w| w as f32).collect())
}

/// Double-width softmax used inside the kernels' accumulation paths.
pub(crate) fn softmax_weights_f64(
    logits: &[f32],
    heads: usize,
    levels: usize,
    points: usize,
) -> Result<Vec<f64>> {
    if logits.len() != heads * levels * points {
        return Err(Error::Config(format!(
            "logit count {} != M*L*K = {}",
            logits.len(),
            heads * levels * points
        )));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { context: "attention logit" });
    }
    let per_head = levels * points;
    let mut weights = vec![0.0f64; logits.len()];
    for m in 0..heads {
        let head = &logits[m * per_head..(m + 1) * per_head];
        let max = head.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let mut sum = 0.0f64;
        let slot = &mut weights[m * per_head..(m + 1) * per_head];
        for (e, &v) in slot.iter_mut().zip(head) {
            *e = (v as f64 - max).exp();
            sum += *e;
        }
        for w in slot.iter_mut() {
            *w /= sum;
        }
    }
    Ok(weights)
}

fn check_shapes(pyramid: &FeaturePyramid, queries: &QueryBatch, weights: &ProjectionWeights) -> Result<()> {
    if pyramid.channels() != weights.channels() {
        return Err(Error::Config(format!(
            "pyramid channels {} != projection channels {}",
            pyramid.channels(),
            weights.channels()
        )));
    }
    if queries.heads() != weights.heads() {
        return Err(Error::Config(format!(
            "query heads {} != projection heads {}",
            queries.heads(),
            weights.heads()
        )));
    }
    if queries.levels() != pyramid.num_levels() {
        return Err(Error::Config(format!(
            "query levels {} != pyramid levels {}",
            queries.levels(),
            pyramid.num_levels()
        )));
    }
    Ok(())
}

/// Pixel-space sampling position of `(ref, offset)` on a `H x W` level,
/// computed double-width.
pub fn sample_position(ref_point: [f32; 2], offset: [f32; 2], height: usize, width: usize) -> (f64, f64) {
    let sx = (width - 1) as f64;
    let sy = (height - 1) as f64;
    (
        (ref_point[0] as f64 + offset[0] as f64) * sx,
        (ref_point[1] as f64 + offset[1] as f64) * sy,
    )
}

/// Two-stage reference evaluation: per sample, project the bilinear sample
/// with the head's value projection, weight and aggregate over `(l, k)`, then
/// apply the head's output projection and sum over heads.
pub fn msdeformattn_reference(
    pyramid: &FeaturePyramid,
    queries: &QueryBatch,
    weights: &ProjectionWeights,
) -> Result<AttentionOutput> {
    check_shapes(pyramid, queries, weights)?;
    let d = weights.channels();
    let head_dim = weights.head_dim();
    let (m_heads, l_levels, k_points) = (queries.heads(), queries.levels(), queries.points());

    let mut data = Vec::with_capacity(queries.len() * d);
    let mut sample = vec![0.0f64; d];
    let mut projected = vec![0.0f64; head_dim];
    let mut head_acc = vec![0.0f64; head_dim];
    for q in 0..queries.len() {
        let attn = softmax_weights_f64(queries.query_logits(q), m_heads, l_levels, k_points)?;
        let mut out = vec![0.0f64; d];
        for m in 0..m_heads {
            head_acc.iter_mut().for_each(|v| *v = 0.0);
            let w_value = weights.value_proj(m);
            for l in 0..l_levels {
                let map = pyramid.level(l);
                for k in 0..k_points {
                    let (x, y) = sample_position(
                        queries.ref_point(q),
                        queries.offset(q, m, l, k),
                        map.height(),
                        map.width(),
                    );
                    if !x.is_finite() || !y.is_finite() {
                        return Err(Error::NonFinite { context: "sampling position" });
                    }
                    sample.iter_mut().for_each(|v| *v = 0.0);
                    bilinear_accumulate(map, x, y, 1.0, &mut sample);
                    // projected = W'_m * sample
                    for (r, p) in projected.iter_mut().enumerate() {
                        let row = &w_value[r * d..(r + 1) * d];
                        *p = row.iter().zip(&sample).map(|(&w, &s)| w as f64 * s).sum();
                    }
                    let a = attn[(m * l_levels + l) * k_points + k];
                    for (h, &p) in head_acc.iter_mut().zip(&projected) {
                        *h += a * p;
                    }
                }
            }
            // out += W_m * head_acc
            let w_out = weights.output_proj(m);
            for (r, o) in out.iter_mut().enumerate() {
                let row = &w_out[r * head_dim..(r + 1) * head_dim];
                *o += row.iter().zip(&head_acc).map(|(&w, &h)| w as f64 * h).sum::<f64>();
            }
        }
        data.extend(out.into_iter().map(|v| v as f32));
    }
    AttentionOutput::new(d, queries.ids().to_vec(), data)
}

/// Populates the folded per-head products `W''_m = W_m * W'_m`.
///
/// Original matrices are retained alongside the folded form.
pub fn fold_projections(weights: &ProjectionWeights) -> ProjectionWeights {
    let d = weights.channels();
    let head_dim = weights.head_dim();
    let mut folded = vec![0.0f32; weights.heads() * d * d];
    for m in 0..weights.heads() {
        let w_out = weights.output_proj(m);
        let w_value = weights.value_proj(m);
        let block = &mut folded[m * d * d..(m + 1) * d * d];
        for r in 0..d {
            for c in 0..d {
                let mut acc = 0.0f64;
                for j in 0..head_dim {
                    acc += w_out[r * head_dim + j] as f64 * w_value[j * d + c] as f64;
                }
                block[r * d + c] = acc as f32;
            }
        }
    }
    ProjectionWeights { folded: Some(folded), ..weights.clone() }
}

/// Single-pass fused evaluation using the folded projections.
///
/// Per query, attention-weighted bilinear samples accumulate into an `M x D`
/// workspace; the folded `W''_m` is then applied and summed over heads. No
/// per-sample intermediate survives across queries. Requires folded weights.
pub fn msdeformattn_fused(
    pyramid: &FeaturePyramid,
    queries: &QueryBatch,
    weights: &ProjectionWeights,
) -> Result<AttentionOutput> {
    check_shapes(pyramid, queries, weights)?;
    if !weights.has_folded() {
        return Err(Error::MissingFolded);
    }
    let d = weights.channels();
    let (m_heads, l_levels, k_points) = (queries.heads(), queries.levels(), queries.points());

    let mut data = Vec::with_capacity(queries.len() * d);
    let mut workspace = vec![0.0f64; m_heads * d];
    for q in 0..queries.len() {
        let attn = softmax_weights_f64(queries.query_logits(q), m_heads, l_levels, k_points)?;
        workspace.iter_mut().for_each(|v| *v = 0.0);
        for m in 0..m_heads {
            let acc = &mut workspace[m * d..(m + 1) * d];
            for l in 0..l_levels {
                let map = pyramid.level(l);
                for k in 0..k_points {
                    let (x, y) = sample_position(
                        queries.ref_point(q),
                        queries.offset(q, m, l, k),
                        map.height(),
                        map.width(),
                    );
                    if !x.is_finite() || !y.is_finite() {
                        return Err(Error::NonFinite { context: "sampling position" });
                    }
                    let a = attn[(m * l_levels + l) * k_points + k];
                    bilinear_accumulate(map, x, y, a, acc);
                }
            }
        }
        let mut out = vec![0.0f64; d];
        for m in 0..m_heads {
            let folded = weights.folded(m).expect("checked above");
            let acc = &workspace[m * d..(m + 1) * d];
            for (r, o) in out.iter_mut().enumerate() {
                let row = &folded[r * d..(r + 1) * d];
                *o += row.iter().zip(acc).map(|(&w, &v)| w as f64 * v).sum::<f64>();
            }
        }
        data.extend(out.into_iter().map(|v| v as f32));
    }
    AttentionOutput::new(d, queries.ids().to_vec(), data)
}
