//! Bit-true mixed-precision simulation of the fused attention pass.
//!
//! Two fixed-point paths cover the kernel:
//!
//! - linear path (bilinear interpolation and the folded projection):
//!   8-bit operands accumulating into 18-bit saturating registers;
//! - aggregation path (softmax and attention weighting): 16-bit weights and
//!   8-bit activations accumulating into 28-bit saturating registers.
//!
//! Activations re-quantize to 8 bits at exactly two points: after bilinear
//! interpolation, and after the weighted aggregation (before the projection).
//! Scales are symmetric reals: per level for features, per output channel
//! for the folded weights, and (by default) per query for the two
//! re-quantized activation stages, i.e. dynamic per-token activation
//! quantization; static per-tensor calibration is available via
//! [`ActivationGranularity::PerTensor`]. Rounding is round-to-nearest-even
//! everywhere, so results are deterministic across platforms.
//!
//! Interpolation and softmax weights are non-negative generator outputs
//! sized to fill their
//! accumulators: 10-fraction-bit
//! interpolation weights make a 2x2 tap sum (`127 * 1024 * (sum w = 1)`)
//! fill the 18-bit register, and 15-fraction-bit softmax weights make an
//! `L*K = 16` aggregation (`32768 * 127 * 16`) just fit the 28-bit register.
//!
//! The softmax exponential is a (2,2) Padé approximant evaluated on the
//! range-reduced argument `e^x = 2^k * e^r`, `r` in `[-ln 2, 0]`; its
//! relative error on the reduced range is about `2.3e-4`.

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionOutput, FeaturePyramid, ProjectionWeights, QueryBatch};
use crate::error::Stage;
use crate::{Error, Result};

// ── Formats ─────────────────────────────────────────────────────────

/// Integer width, binary point and saturation behaviour of one operand class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixedPointFormat {
    pub total_bits: u32,
    pub frac_bits: u32,
    pub signed: bool,
    pub saturating: bool,
}

impl FixedPointFormat {
    pub const fn new(total_bits: u32, frac_bits: u32, signed: bool, saturating: bool) -> Self {
        Self { total_bits, frac_bits, signed, saturating }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frac_bits == 0 || self.frac_bits >= self.total_bits || self.total_bits > 32 {
            return Err(Error::Config(format!(
                "fixed-point format must satisfy 0 < frac_bits < total_bits <= 32, got {}/{}",
                self.frac_bits, self.total_bits
            )));
        }
        Ok(())
    }

    /// Largest representable code (symmetric range for signed formats).
    pub fn max_code(&self) -> i64 {
        if self.signed {
            (1i64 << (self.total_bits - 1)) - 1
        } else {
            (1i64 << self.total_bits) - 1
        }
    }

    pub fn min_code(&self) -> i64 {
        if self.signed {
            -self.max_code()
        } else {
            0
        }
    }

    /// Codes per unit value, `2^frac_bits`.
    pub fn unit(&self) -> f64 {
        (1i64 << self.frac_bits) as f64
    }
}

/// How a tensor's quantization scale is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalePolicy {
    /// Symmetric per-tensor scale: the max-abs value maps to the largest
    /// representable magnitude.
    MaxAbs,
    /// Caller-supplied scale.
    Explicit(f64),
}

/// An integer tensor with its dequantization scale.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub codes: Vec<i32>,
    pub scale: f64,
    pub format: FixedPointFormat,
}

impl QuantizedTensor {
    pub fn dequantize(&self) -> Vec<f64> {
        self.codes.iter().map(|&c| c as f64 * self.scale).collect()
    }
}

/// Mixed-precision widths for the two kernel paths. All canonical formats
/// saturate on overflow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrecisionPlan {
    pub weight_fmt_linear: FixedPointFormat,
    pub act_fmt_linear: FixedPointFormat,
    pub accum_fmt_linear: FixedPointFormat,
    pub weight_fmt_agg: FixedPointFormat,
    pub act_fmt_agg: FixedPointFormat,
    pub accum_fmt_agg: FixedPointFormat,
}

impl Default for PrecisionPlan {
    fn default() -> Self {
        Self {
            weight_fmt_linear: FixedPointFormat::new(8, 7, true, true),
            act_fmt_linear: FixedPointFormat::new(8, 7, true, true),
            accum_fmt_linear: FixedPointFormat::new(18, 12, true, true),
            weight_fmt_agg: FixedPointFormat::new(16, 15, false, true),
            act_fmt_agg: FixedPointFormat::new(8, 7, true, true),
            accum_fmt_agg: FixedPointFormat::new(28, 20, true, true),
        }
    }
}

impl PrecisionPlan {
    pub fn validate(&self) -> Result<()> {
        let widths = [
            (self.weight_fmt_linear, 8u32, "weight_fmt_linear"),
            (self.act_fmt_linear, 8, "act_fmt_linear"),
            (self.accum_fmt_linear, 18, "accum_fmt_linear"),
            (self.weight_fmt_agg, 16, "weight_fmt_agg"),
            (self.act_fmt_agg, 8, "act_fmt_agg"),
            (self.accum_fmt_agg, 28, "accum_fmt_agg"),
        ];
        for (fmt, bits, name) in widths {
            fmt.validate()?;
            if fmt.total_bits != bits {
                return Err(Error::Config(format!("{name} must be {bits}-bit, got {}", fmt.total_bits)));
            }
        }
        if self.accum_fmt_agg.frac_bits < self.weight_fmt_agg.frac_bits {
            return Err(Error::Config(
                "aggregation accumulator needs at least the softmax weight's fraction bits".into(),
            ));
        }
        Ok(())
    }

    /// Bilinear interpolation weights are non-negative generator outputs
    /// sized so a full 2x2 tap sum exactly fills the linear accumulator:
    /// `frac = accum_bits - act_bits` fraction bits (10 for the A18/A8
    /// defaults), with `w = 1` representable exactly.
    pub fn interp_weight_format(&self) -> FixedPointFormat {
        let frac = self.accum_fmt_linear.total_bits - self.act_fmt_linear.total_bits;
        FixedPointFormat::new(frac + 1, frac, false, self.accum_fmt_linear.saturating)
    }
}

/// Per-stage saturation event counts for one quantized run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SaturationCounters {
    pub input_quant: u64,
    pub bilinear_accum: u64,
    pub bilinear_requant: u64,
    pub softmax: u64,
    pub aggregation_accum: u64,
    pub aggregation_requant: u64,
    pub projection_accum: u64,
}

impl SaturationCounters {
    pub fn total(&self) -> u64 {
        self.input_quant
            + self.bilinear_accum
            + self.bilinear_requant
            + self.softmax
            + self.aggregation_accum
            + self.aggregation_requant
            + self.projection_accum
    }

    fn slot(&mut self, stage: Stage) -> &mut u64 {
        match stage {
            Stage::InputQuant => &mut self.input_quant,
            Stage::BilinearAccum => &mut self.bilinear_accum,
            Stage::BilinearRequant => &mut self.bilinear_requant,
            Stage::Softmax => &mut self.softmax,
            Stage::Aggregation => &mut self.aggregation_accum,
            Stage::AggregationRequant => &mut self.aggregation_requant,
            Stage::Projection => &mut self.projection_accum,
        }
    }
}

// ── Integer rounding helpers ────────────────────────────────────────

/// Round-to-nearest-even integer division, `d > 0`.
fn rne_div(n: i128, d: i128) -> i128 {
    debug_assert!(d > 0);
    let q = n.div_euclid(d);
    let r = n.rem_euclid(d);
    let twice = 2 * r;
    if twice > d || (twice == d && q & 1 != 0) {
        q + 1
    } else {
        q
    }
}

/// Clamp `value` into `format`'s range, counting (or rejecting) overflow.
fn clamp_code(
    value: i64,
    format: &FixedPointFormat,
    stage: Stage,
    counters: &mut SaturationCounters,
) -> Result<i64> {
    let (lo, hi) = (format.min_code(), format.max_code());
    if value >= lo && value <= hi {
        return Ok(value);
    }
    if !format.saturating {
        return Err(Error::Overflow { stage, value, bits: format.total_bits });
    }
    *counters.slot(stage) += 1;
    Ok(value.clamp(lo, hi))
}

fn quantize_value(
    value: f64,
    scale: f64,
    format: &FixedPointFormat,
    stage: Stage,
    counters: &mut SaturationCounters,
) -> Result<i32> {
    let code = (value / scale).round_ties_even();
    // guard the f64 -> i64 cast before clamping
    let code = code.clamp(-(1i64 << 62) as f64, (1i64 << 62) as f64) as i64;
    Ok(clamp_code(code, format, stage, counters)? as i32)
}

// ── quantize / dequantize ───────────────────────────────────────────

/// Quantizes a tensor with round-to-nearest-even and saturation.
///
/// Under `MaxAbs` the scale maps the tensor's max-abs value to the largest
/// representable magnitude; an empty tensor is rejected. Non-saturating
/// formats turn overflow into an error.
pub fn quantize(values: &[f32], format: FixedPointFormat, policy: ScalePolicy) -> Result<QuantizedTensor> {
    format.validate()?;
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { context: "quantize input" });
    }
    let scale = match policy {
        ScalePolicy::Explicit(s) => {
            if !(s.is_finite() && s > 0.0) {
                return Err(Error::Config(format!("explicit scale must be positive, got {s}")));
            }
            s
        }
        ScalePolicy::MaxAbs => {
            if values.is_empty() {
                return Err(Error::Empty { context: "tensor under max-abs scaling" });
            }
            let max_abs = values.iter().fold(0.0f64, |a, &v| a.max((v as f64).abs()));
            if max_abs == 0.0 {
                1.0 // all-zero tensor: any scale represents it exactly
            } else {
                max_abs / format.max_code() as f64
            }
        }
    };
    let mut counters = SaturationCounters::default();
    let codes = values
        .iter()
        .map(|&v| quantize_value(v as f64, scale, &format, Stage::InputQuant, &mut counters))
        .collect::<Result<Vec<i32>>>()?;
    Ok(QuantizedTensor { codes, scale, format })
}

// ── Padé exponential ────────────────────────────────────────────────

/// `ln 2` in the format's binary-point grid.
fn ln2_code(format: &FixedPointFormat) -> i64 {
    (std::f64::consts::LN_2 * format.unit()).round() as i64
}

/// (2,2) Padé approximant of `e^r` on the reduced range `[-ln 2, 0]`,
/// evaluated in the format's fixed-point grid:
/// `R(r) = (12 + 6r + r^2) / (12 - 6r + r^2)`.
///
/// The caller performs the range reduction `e^x = 2^k * e^r`. Arguments
/// outside the reduced range are a contract violation.
pub fn pade_exp(r: i64, format: &FixedPointFormat) -> Result<i64> {
    let one = 1i128 << format.frac_bits;
    let ln2 = ln2_code(format);
    if r > 0 || r < -(ln2 + 1) {
        return Err(Error::ContractViolation {
            context: "pade_exp argument outside [-ln 2, 0]",
            value: r as f64 / format.unit(),
        });
    }
    let r = r as i128;
    let r2 = rne_div(r * r, one);
    let num = 12 * one + 6 * r + r2;
    let den = 12 * one - 6 * r + r2;
    Ok(rne_div(num << format.frac_bits, den) as i64)
}

/// `e^x` for non-positive `x` in the format's grid, range reduction and
/// power-of-two rescale done in integer arithmetic. Underflows to 0.
pub fn exp_fixed_code(x: i64, format: &FixedPointFormat) -> Result<i64> {
    if x > 0 {
        return Err(Error::ContractViolation {
            context: "exp_fixed_code argument must be non-positive",
            value: x as f64 / format.unit(),
        });
    }
    let ln2 = ln2_code(format);
    let k = -((-x) / ln2); // ceil(x / ln2) for x <= 0
    let r = (x - k * ln2).min(0);
    let e = pade_exp(r, format)?;
    let shift = (-k) as u32;
    if shift >= 63 {
        return Ok(0);
    }
    Ok(rne_div(e as i128, 1i128 << shift) as i64)
}

/// `e^x` over the full non-positive domain: fixed-point Padé mantissa
/// combined with an exact power-of-two factor.
pub fn exp_reduced(x: f64, format: &FixedPointFormat) -> Result<f64> {
    if !x.is_finite() || x > 0.0 {
        return Err(Error::ContractViolation { context: "exp_reduced argument must be non-positive", value: x });
    }
    let k = (x / std::f64::consts::LN_2).ceil() as i32;
    let r = x - k as f64 * std::f64::consts::LN_2;
    let r_code = ((r * format.unit()).round_ties_even() as i64).clamp(-(ln2_code(format) + 1), 0);
    let mantissa = pade_exp(r_code, format)? as f64 / format.unit();
    Ok(mantissa * 2.0f64.powi(k))
}

// ── Quantized softmax ───────────────────────────────────────────────

/// Per-head softmax over 8-bit logit codes, computed in the 28-bit
/// aggregation accumulator grid: max-subtraction, Padé exponential,
/// then division. Returns `M*L*K` weights in the aggregation weight format
/// (scale `2^-frac`), summing to 1 within `2^-8` per head.
pub fn quantized_softmax(
    logit_codes: &[i32],
    logit_scale: f64,
    heads: usize,
    levels: usize,
    points: usize,
    plan: &PrecisionPlan,
    counters: &mut SaturationCounters,
) -> Result<QuantizedTensor> {
    let per_head = levels * points;
    if logit_codes.len() != heads * per_head {
        return Err(Error::Config(format!(
            "logit count {} != M*L*K = {}",
            logit_codes.len(),
            heads * per_head
        )));
    }
    let acc_fmt = plan.accum_fmt_agg;
    let w_fmt = plan.weight_fmt_agg;
    let mut codes = vec![0i32; logit_codes.len()];
    for m in 0..heads {
        let head = &logit_codes[m * per_head..(m + 1) * per_head];
        let max = *head.iter().max().expect("per_head >= 1");
        let mut exps = vec![0i64; per_head];
        let mut sum = 0i64;
        for (e, &c) in exps.iter_mut().zip(head) {
            let diff = (c - max) as f64 * logit_scale;
            let x = ((diff * acc_fmt.unit()).round_ties_even() as i64).max(-(64i64 << acc_fmt.frac_bits));
            *e = exp_fixed_code(x, &acc_fmt)?;
            sum = clamp_code(sum + *e, &acc_fmt, Stage::Softmax, counters)?;
        }
        for (slot, &e) in codes[m * per_head..(m + 1) * per_head].iter_mut().zip(&exps) {
            let a = rne_div((e as i128) << w_fmt.frac_bits, sum as i128) as i64;
            *slot = clamp_code(a, &w_fmt, Stage::Softmax, counters)? as i32;
        }
    }
    Ok(QuantizedTensor { codes, scale: 1.0 / w_fmt.unit(), format: w_fmt })
}

// ── Quantized fused kernel ──────────────────────────────────────────

/// Scale selection for the quantized fused pass. `MaxAbs` resolves per
/// tensor: per level for features, per output channel for the folded
/// weights, and over the whole batch for logits and the two re-quantized
/// activation stages (calibrated from the quantized pipeline itself).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantizerConfig {
    pub plan: PrecisionPlan,
    pub feature_scale: ScalePolicy,
    pub weight_scale: ScalePolicy,
    pub logit_scale: ScalePolicy,
    pub sample_scale: ScalePolicy,
    pub aggregate_scale: ScalePolicy,
    /// Calibration granularity of the two re-quantized activation stages.
    pub activation_granularity: ActivationGranularity,
}

/// How the sample and aggregate re-quantization scales are calibrated when
/// their policy is `MaxAbs`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationGranularity {
    /// One static scale over the whole batch tensor.
    PerTensor,
    /// One dynamic scale per query (per-token activation quantization).
    PerQuery,
}

impl Default for QuantizerConfig {
    fn default() -> Self {
        Self {
            plan: PrecisionPlan::default(),
            feature_scale: ScalePolicy::MaxAbs,
            weight_scale: ScalePolicy::MaxAbs,
            logit_scale: ScalePolicy::MaxAbs,
            sample_scale: ScalePolicy::MaxAbs,
            aggregate_scale: ScalePolicy::MaxAbs,
            activation_granularity: ActivationGranularity::PerQuery,
        }
    }
}

/// Scales the quantizer resolved for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedScales {
    pub features: Vec<f64>,
    /// One scale per output channel of the folded projection.
    pub weights: Vec<f64>,
    pub logits: f64,
    /// Per-query under `PerQuery` granularity, a single entry otherwise.
    pub samples: Vec<f64>,
    /// Per-query under `PerQuery` granularity, a single entry otherwise.
    pub aggregates: Vec<f64>,
}

/// Result of the quantized fused pass.
#[derive(Debug, Clone)]
pub struct QuantizedAttention {
    pub output: AttentionOutput,
    pub saturation: SaturationCounters,
    pub scales: ResolvedScales,
}

struct QuantizedState<'a> {
    pyramid: &'a FeaturePyramid,
    queries: &'a QueryBatch,
    plan: PrecisionPlan,
    feat_codes: Vec<Vec<i32>>,
    feat_scales: Vec<f64>,
    weight_codes: Vec<i32>,
    weight_scales: Vec<f64>,
    logit_codes: Vec<i32>,
    logit_scale: f64,
}

impl<'a> QuantizedState<'a> {
    /// 18-bit tap accumulation of one sample: unsigned 8-bit interpolation
    /// weights times 8-bit feature codes, out-of-range taps contributing zero.
    fn bilinear_acc(
        &self,
        level: usize,
        x: f64,
        y: f64,
        acc: &mut [i64],
        counters: &mut SaturationCounters,
    ) -> Result<()> {
        let map = self.pyramid.level(level);
        let (h, w, d) = (map.height(), map.width(), map.channels());
        let interp = self.plan.interp_weight_format();
        let acc_fmt = self.plan.accum_fmt_linear;
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let (x0, y0) = (x0 as i64, y0 as i64);
        let taps = [
            (x0, y0, (1.0 - fx) * (1.0 - fy)),
            (x0 + 1, y0, fx * (1.0 - fy)),
            (x0, y0 + 1, (1.0 - fx) * fy),
            (x0 + 1, y0 + 1, fx * fy),
        ];
        acc.iter_mut().for_each(|v| *v = 0);
        let codes = &self.feat_codes[level];
        for (tx, ty, tw) in taps {
            if tx < 0 || ty < 0 || tx >= w as i64 || ty >= h as i64 {
                continue;
            }
            let wq = (tw * interp.unit()).round_ties_even() as i64;
            let wq = clamp_code(wq, &interp, Stage::BilinearAccum, counters)?;
            let base = (ty as usize * w + tx as usize) * d;
            for (a, &c) in acc.iter_mut().zip(&codes[base..base + d]) {
                *a = clamp_code(*a + wq * c as i64, &acc_fmt, Stage::BilinearAccum, counters)?;
            }
        }
        Ok(())
    }

    /// Walks every sample of every query, handing the 18-bit accumulator,
    /// its real-valued scale, and the shared counters to `visit`.
    fn for_each_sample<F>(&self, counters: &mut SaturationCounters, mut visit: F) -> Result<()>
    where
        F: FnMut(usize, usize, usize, usize, &[i64], f64, &mut SaturationCounters) -> Result<()>,
    {
        let d = self.pyramid.channels();
        let interp_unit = self.plan.interp_weight_format().unit();
        let mut acc = vec![0i64; d];
        for q in 0..self.queries.len() {
            for m in 0..self.queries.heads() {
                for l in 0..self.queries.levels() {
                    let map = self.pyramid.level(l);
                    for k in 0..self.queries.points() {
                        let (x, y) = crate::attention::sample_position(
                            self.queries.ref_point(q),
                            self.queries.offset(q, m, l, k),
                            map.height(),
                            map.width(),
                        );
                        self.bilinear_acc(l, x, y, &mut acc, counters)?;
                        let scale = self.feat_scales[l] / interp_unit;
                        visit(q, m, l, k, &acc, scale, counters)?;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Bit-true fused pass under the mixed-precision plan. Returns dequantized
/// outputs plus per-stage saturation counters and the resolved scales.
pub fn msdeformattn_fused_quantized(
    pyramid: &FeaturePyramid,
    queries: &QueryBatch,
    weights: &ProjectionWeights,
    config: &QuantizerConfig,
) -> Result<QuantizedAttention> {
    config.plan.validate()?;
    if !weights.has_folded() {
        return Err(Error::MissingFolded);
    }
    if pyramid.channels() != weights.channels() || queries.heads() != weights.heads()
        || queries.levels() != pyramid.num_levels()
    {
        return Err(Error::Config("quantized kernel arguments disagree on shapes".into()));
    }
    let plan = config.plan;
    let d = weights.channels();
    let m_heads = weights.heads();
    let mut counters = SaturationCounters::default();

    // input tensors: features per level, folded weights per output channel,
    // logits over the batch
    let mut feat_codes = Vec::with_capacity(pyramid.num_levels());
    let mut feat_scales = Vec::with_capacity(pyramid.num_levels());
    for map in pyramid.levels() {
        let t = quantize(map.data(), plan.act_fmt_linear, config.feature_scale)?;
        feat_scales.push(t.scale);
        feat_codes.push(t.codes);
    }

    let w_fmt = plan.weight_fmt_linear;
    let mut weight_scales = vec![0.0f64; d];
    for c in 0..d {
        weight_scales[c] = match config.weight_scale {
            ScalePolicy::Explicit(s) => s,
            ScalePolicy::MaxAbs => {
                let mut max_abs = 0.0f64;
                for m in 0..m_heads {
                    let folded = weights.folded(m).expect("checked");
                    for &v in &folded[c * d..(c + 1) * d] {
                        max_abs = max_abs.max((v as f64).abs());
                    }
                }
                if max_abs == 0.0 {
                    1.0
                } else {
                    max_abs / w_fmt.max_code() as f64
                }
            }
        };
    }
    let mut weight_codes = vec![0i32; m_heads * d * d];
    for m in 0..m_heads {
        let folded = weights.folded(m).expect("checked");
        for c in 0..d {
            for j in 0..d {
                weight_codes[(m * d + c) * d + j] = quantize_value(
                    folded[c * d + j] as f64,
                    weight_scales[c],
                    &w_fmt,
                    Stage::InputQuant,
                    &mut counters,
                )?;
            }
        }
    }

    let logit_tensor = if queries.is_empty() {
        QuantizedTensor { codes: vec![], scale: 1.0, format: plan.act_fmt_agg }
    } else {
        quantize(queries.logits(), plan.act_fmt_agg, config.logit_scale)?
    };

    let state = QuantizedState {
        pyramid,
        queries,
        plan,
        feat_codes,
        feat_scales,
        weight_codes,
        weight_scales,
        logit_codes: logit_tensor.codes,
        logit_scale: logit_tensor.scale,
    };

    // calibration pass 1: common 8-bit scale for re-quantized samples
    // calibration: scales for the re-quantized samples, per query or per
    // batch tensor
    let act_max = plan.act_fmt_linear.max_code() as f64;
    let per_query = config.activation_granularity == ActivationGranularity::PerQuery;
    let n = queries.len();
    let scale_from_max = |max_abs: f64| if max_abs == 0.0 { 1.0 } else { max_abs / act_max };
    let sample_scales: Vec<f64> = match config.sample_scale {
        ScalePolicy::Explicit(s) => vec![s; n],
        ScalePolicy::MaxAbs => {
            let mut maxima = vec![0.0f64; n.max(1)];
            state.for_each_sample(&mut counters, |q, _, _, _, acc, scale, _| {
                let slot = if per_query { q } else { 0 };
                for &a in acc {
                    maxima[slot] = maxima[slot].max((a as f64 * scale).abs());
                }
                Ok(())
            })?;
            if !per_query {
                maxima = vec![maxima[0]; n.max(1)];
            }
            maxima.truncate(n);
            maxima.into_iter().map(scale_from_max).collect()
        }
    };

    // per-query softmax weights
    let samples = m_heads * queries.levels() * queries.points();
    let mut attn_codes = vec![0i32; n * samples];
    for q in 0..n {
        let a = quantized_softmax(
            &state.logit_codes[q * samples..(q + 1) * samples],
            state.logit_scale,
            m_heads,
            queries.levels(),
            queries.points(),
            &plan,
            &mut counters,
        )?;
        attn_codes[q * samples..(q + 1) * samples].copy_from_slice(&a.codes);
    }
    let attn_unit = plan.weight_fmt_agg.unit();

    // aggregation pass: requantize each sample to 8 bits and accumulate
    // A * sample into the per-(query, head) 28-bit registers
    let agg_fmt = plan.accum_fmt_agg;
    let mut agg = vec![0i64; n * m_heads * d];
    {
        let agg = &mut agg;
        let attn_codes = &attn_codes;
        let sample_scales = &sample_scales;
        let mut sample8 = vec![0i32; d];
        let (l_levels, k_points) = (queries.levels(), queries.points());
        state.for_each_sample(&mut counters, |q, m, l, k, acc, scale, counters| {
            for (s8, &a) in sample8.iter_mut().zip(acc.iter()) {
                *s8 = quantize_value(
                    a as f64 * scale,
                    sample_scales[q],
                    &plan.act_fmt_linear,
                    Stage::BilinearRequant,
                    counters,
                )?;
            }
            let a_code = attn_codes[(q * m_heads + m) * l_levels * k_points + l * k_points + k] as i64;
            let slot = &mut agg[(q * m_heads + m) * d..(q * m_heads + m + 1) * d];
            for (g, &s8) in slot.iter_mut().zip(sample8.iter()) {
                *g = clamp_code(*g + a_code * s8 as i64, &agg_fmt, Stage::Aggregation, counters)?;
            }
            Ok(())
        })?;
    }

    // re-quantize aggregates to 8 bits (calibrated scale), then project
    let aggregate_scales: Vec<f64> = match config.aggregate_scale {
        ScalePolicy::Explicit(s) => vec![s; n],
        ScalePolicy::MaxAbs => {
            let mut maxima = vec![0.0f64; n.max(1)];
            for q in 0..n {
                let real_scale = sample_scales[q] / attn_unit;
                let slot = if per_query { q } else { 0 };
                for &g in &agg[q * m_heads * d..(q + 1) * m_heads * d] {
                    maxima[slot] = maxima[slot].max((g as f64 * real_scale).abs());
                }
            }
            if !per_query {
                maxima = vec![maxima[0]; n.max(1)];
            }
            maxima.truncate(n);
            maxima.into_iter().map(scale_from_max).collect()
        }
    };
    let mut agg8 = vec![0i32; agg.len()];
    for q in 0..n {
        let real_scale = sample_scales[q] / attn_unit;
        for i in q * m_heads * d..(q + 1) * m_heads * d {
            agg8[i] = quantize_value(
                agg[i] as f64 * real_scale,
                aggregate_scales[q],
                &plan.act_fmt_agg,
                Stage::AggregationRequant,
                &mut counters,
            )?;
        }
    }

    let lin_fmt = plan.accum_fmt_linear;
    let mut data = Vec::with_capacity(n * d);
    for q in 0..n {
        for c in 0..d {
            let mut acc = 0i64;
            for m in 0..m_heads {
                let wrow = &state.weight_codes[(m * d + c) * d..(m * d + c + 1) * d];
                let arow = &agg8[(q * m_heads + m) * d..(q * m_heads + m + 1) * d];
                for (&wc, &ac) in wrow.iter().zip(arow) {
                    acc = clamp_code(acc + wc as i64 * ac as i64, &lin_fmt, Stage::Projection, &mut counters)?;
                }
            }
            data.push((acc as f64 * state.weight_scales[c] * aggregate_scales[q]) as f32);
        }
    }

    let output = AttentionOutput::new(d, queries.ids().to_vec(), data)?;
    Ok(QuantizedAttention {
        output,
        saturation: counters,
        scales: ResolvedScales {
            features: state.feat_scales.clone(),
            weights: state.weight_scales.clone(),
            logits: state.logit_scale,
            samples: sample_scales,
            aggregates: aggregate_scales,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{
        fold_projections, msdeformattn_fused, FeatureMap, FeaturePyramid, ProjectionWeights, QueryBatch,
    };
    use crate::workload::{random_instance, InstanceSpec};
    use proptest::prelude::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn i8_fmt() -> FixedPointFormat {
        FixedPointFormat::new(8, 7, true, true)
    }

    fn agg_fmt() -> FixedPointFormat {
        PrecisionPlan::default().accum_fmt_agg
    }

    // ── quantize ────────────────────────────────────────────────────

    #[test]
    fn quantize_endpoints_hit_full_scale() {
        let t = quantize(&[-1.0, 0.0, 1.0], i8_fmt(), ScalePolicy::MaxAbs).unwrap();
        assert_eq!(t.codes, vec![-127, 0, 127]);
        assert!((t.scale - 1.0 / 127.0).abs() < 1e-15);
    }

    #[test]
    fn quantize_all_zero_with_explicit_scale() {
        let t = quantize(&[0.0; 5], i8_fmt(), ScalePolicy::Explicit(0.25)).unwrap();
        assert!(t.codes.iter().all(|&c| c == 0));
        assert_eq!(t.scale, 0.25);
    }

    #[test]
    fn quantize_error_bounded_by_half_scale() {
        let mut rng = StdRng::seed_from_u64(2);
        let values: Vec<f32> = (0..500).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let t = quantize(&values, i8_fmt(), ScalePolicy::MaxAbs).unwrap();
        for (v, d) in values.iter().zip(t.dequantize()) {
            assert!((*v as f64 - d).abs() <= t.scale / 2.0 + 1e-12);
        }
    }

    #[test]
    fn quantize_rejects_empty_maxabs_and_nan() {
        assert!(matches!(quantize(&[], i8_fmt(), ScalePolicy::MaxAbs), Err(Error::Empty { .. })));
        assert!(matches!(
            quantize(&[f32::NAN], i8_fmt(), ScalePolicy::Explicit(1.0)),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn quantize_without_saturation_errors_on_overflow() {
        let fmt = FixedPointFormat::new(8, 7, true, false);
        let err = quantize(&[100.0], fmt, ScalePolicy::Explicit(0.5)).unwrap_err();
        assert!(matches!(err, Error::Overflow { stage: Stage::InputQuant, .. }));
    }

    #[test]
    fn saturation_clamps_instead_of_wrapping() {
        let t = quantize(&[100.0, -100.0], i8_fmt(), ScalePolicy::Explicit(0.5)).unwrap();
        assert_eq!(t.codes, vec![127, -127]);
    }

    proptest! {
        #[test]
        fn roundtrip_exact_on_representable_grid(codes in proptest::collection::vec(-127i32..=127, 1..64)) {
            let scale = 0.03125f64;
            let values: Vec<f32> = codes.iter().map(|&c| (c as f64 * scale) as f32).collect();
            let t = quantize(&values, i8_fmt(), ScalePolicy::Explicit(scale)).unwrap();
            prop_assert_eq!(&t.codes, &codes);
            let back = t.dequantize();
            for (v, b) in values.iter().zip(back) {
                prop_assert_eq!(*v as f64, b);
            }
        }
    }

    // ── pade_exp ────────────────────────────────────────────────────

    #[test]
    fn pade_exp_of_zero_is_exactly_one() {
        let fmt = agg_fmt();
        let one = 1i64 << fmt.frac_bits;
        assert_eq!(pade_exp(0, &fmt).unwrap(), one);
    }

    #[test]
    fn pade_exp_at_minus_ln2_is_half() {
        let fmt = agg_fmt();
        let r = (-std::f64::consts::LN_2 * fmt.unit()).round() as i64;
        let e = pade_exp(r, &fmt).unwrap() as f64 / fmt.unit();
        assert!((e - 0.5).abs() / 0.5 <= 3e-4, "got {e}");
    }

    #[test]
    fn pade_exp_rejects_out_of_range() {
        let fmt = agg_fmt();
        assert!(matches!(pade_exp(1, &fmt), Err(Error::ContractViolation { .. })));
        let far = (-2.0 * fmt.unit()) as i64;
        assert!(matches!(pade_exp(far, &fmt), Err(Error::ContractViolation { .. })));
    }

    #[test]
    fn exp_reduced_sweep_meets_error_budget() {
        // 10^4 points over the full pre-reduction domain [-20, 0]
        let fmt = agg_fmt();
        let mut max_rel = 0.0f64;
        for i in 0..=10_000 {
            let x = -20.0 * i as f64 / 10_000.0;
            let got = exp_reduced(x, &fmt).unwrap();
            let expect = x.exp();
            max_rel = max_rel.max((got - expect).abs() / expect);
        }
        assert!(max_rel <= 3e-4, "max relative error {max_rel}");
    }

    #[test]
    fn exp_fixed_code_underflows_to_zero() {
        let fmt = agg_fmt();
        let x = (-50.0 * fmt.unit()) as i64;
        assert_eq!(exp_fixed_code(x, &fmt).unwrap(), 0);
    }

    // ── quantized_softmax ───────────────────────────────────────────

    fn float_softmax(values: &[f64]) -> Vec<f64> {
        let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = values.iter().map(|v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / sum).collect()
    }

    #[test]
    fn quantized_softmax_uniform_logits() {
        let plan = PrecisionPlan::default();
        let mut counters = SaturationCounters::default();
        let codes = vec![37i32; 2 * 2 * 4];
        let a = quantized_softmax(&codes, 0.01, 2, 2, 4, &plan, &mut counters).unwrap();
        let step = a.scale;
        for w in a.dequantize() {
            assert!((w - 1.0 / 8.0).abs() <= step, "weight {w}");
        }
    }

    #[test]
    fn quantized_softmax_one_hot_saturated_logits() {
        let plan = PrecisionPlan::default();
        let mut counters = SaturationCounters::default();
        // saturated max vs min at a scale that makes the gap decisive
        let logits: Vec<f32> = (0..8).map(|i| if i == 3 { 10.0 } else { -10.0 }).collect();
        let q = quantize(&logits, plan.act_fmt_agg, ScalePolicy::MaxAbs).unwrap();
        assert_eq!(q.codes[3], 127);
        assert_eq!(q.codes[0], -127);
        let a = quantized_softmax(&q.codes, q.scale, 1, 2, 4, &plan, &mut counters).unwrap();
        let w = a.dequantize();
        assert!(w[3] >= 0.99, "winning weight {}", w[3]);
    }

    #[test]
    fn quantized_softmax_tracks_float_softmax() {
        let plan = PrecisionPlan::default();
        let mut rng = StdRng::seed_from_u64(6);
        for _ in 0..50 {
            let logits: Vec<f32> = (0..2 * 4 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let q = quantize(&logits, plan.act_fmt_agg, ScalePolicy::MaxAbs).unwrap();
            let mut counters = SaturationCounters::default();
            let a = quantized_softmax(&q.codes, q.scale, 2, 4, 4, &plan, &mut counters).unwrap();
            let a = a.dequantize();
            let deq = q.dequantize();
            for m in 0..2 {
                let head = &deq[m * 16..(m + 1) * 16];
                let oracle = float_softmax(head);
                for (i, &expect) in oracle.iter().enumerate() {
                    let got = a[m * 16 + i];
                    assert!((got - expect).abs() <= 1.0 / 128.0, "got {got}, oracle {expect}");
                }
            }
        }
    }

    #[test]
    fn quantized_softmax_sums_to_one_per_head() {
        let plan = PrecisionPlan::default();
        let mut rng = StdRng::seed_from_u64(8);
        for _ in 0..100 {
            let logits: Vec<f32> = (0..4 * 4 * 4).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let q = quantize(&logits, plan.act_fmt_agg, ScalePolicy::MaxAbs).unwrap();
            let mut counters = SaturationCounters::default();
            let a = quantized_softmax(&q.codes, q.scale, 4, 4, 4, &plan, &mut counters).unwrap();
            let a = a.dequantize();
            for m in 0..4 {
                let sum: f64 = a[m * 16..(m + 1) * 16].iter().sum();
                assert!((sum - 1.0).abs() <= 1.0 / 256.0, "head sum {sum}");
            }
        }
    }

    #[test]
    fn quantized_softmax_preserves_argmax_for_clear_gaps() {
        let plan = PrecisionPlan::default();
        let mut rng = StdRng::seed_from_u64(10);
        let mut checked = 0;
        while checked < 60 {
            let logits: Vec<f32> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let q = quantize(&logits, plan.act_fmt_agg, ScalePolicy::MaxAbs).unwrap();
            let mut sorted = q.codes.clone();
            sorted.sort_unstable_by_key(|&c| std::cmp::Reverse(c));
            if sorted[0] - sorted[1] < 2 {
                continue; // gap below two quantization steps: not claimed
            }
            let mut counters = SaturationCounters::default();
            let a = quantized_softmax(&q.codes, q.scale, 1, 2, 4, &plan, &mut counters).unwrap();
            let float_arg = {
                let deq = q.dequantize();
                let o = float_softmax(&deq);
                o.iter().enumerate().max_by(|a, b| a.1.partial_cmp(b.1).unwrap()).unwrap().0
            };
            let quant_arg =
                a.codes.iter().enumerate().max_by_key(|&(i, &c)| (c, std::cmp::Reverse(i))).unwrap().0;
            assert_eq!(quant_arg, float_arg);
            checked += 1;
        }
    }

    // ── fused quantized kernel ──────────────────────────────────────

    /// All-integer instance: exact at every stage under unit scales.
    fn exact_instance() -> (FeaturePyramid, QueryBatch, ProjectionWeights) {
        let d = 4;
        let heads = 2;
        // constant integer features per channel keep every aggregation exact
        let mut data = vec![0.0f32; 6 * 6 * d];
        for cell in data.chunks_mut(d) {
            cell.copy_from_slice(&[1.0, -2.0, 3.0, 0.0]);
        }
        let map = FeatureMap::new(6, 6, d, data).unwrap();
        let pyramid = FeaturePyramid::new(vec![map]).unwrap();

        let samples = heads * 4; // L=1, K=4 per head: uniform A = 1/4 exact
        let batch = QueryBatch::new(
            vec![0, 1],
            vec![[0.2, 0.4], [0.6, 0.8]],
            vec![[0.0, 0.0]; 2 * samples],
            vec![0.0; 2 * samples],
            heads,
            1,
            4,
        )
        .unwrap();

        let head_dim = d / heads;
        let mut rng = StdRng::seed_from_u64(55);
        let value: Vec<f32> = (0..heads * head_dim * d).map(|_| rng.gen_range(-2i32..=2) as f32).collect();
        let output: Vec<f32> = (0..heads * d * head_dim).map(|_| rng.gen_range(-2i32..=2) as f32).collect();
        let weights = fold_projections(&ProjectionWeights::new(d, heads, value, output).unwrap());
        (pyramid, batch, weights)
    }

    #[test]
    fn quantized_matches_float_exactly_on_integer_instance() {
        let (pyramid, batch, weights) = exact_instance();
        let config = QuantizerConfig {
            feature_scale: ScalePolicy::Explicit(1.0),
            weight_scale: ScalePolicy::Explicit(1.0),
            logit_scale: ScalePolicy::Explicit(1.0),
            sample_scale: ScalePolicy::Explicit(1.0),
            aggregate_scale: ScalePolicy::Explicit(1.0),
            ..QuantizerConfig::default()
        };
        let q = msdeformattn_fused_quantized(&pyramid, &batch, &weights, &config).unwrap();
        let f = msdeformattn_fused(&pyramid, &batch, &weights).unwrap();
        assert_eq!(q.output.data(), f.data());
        assert_eq!(q.saturation.total(), 0);
    }

    fn l2_rel_error(a: &[f32], b: &[f32]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(&x, &y)| ((x - y) as f64).powi(2)).sum();
        let den: f64 = b.iter().map(|&y| (y as f64).powi(2)).sum();
        (num / den.max(1e-30)).sqrt()
    }

    #[test]
    fn quantized_error_bounded_on_normalized_inputs() {
        // pooled relative L2 over the seed ensemble; per-seed errors spread
        // around 0.9e-2 by roughly +-20%, so each seed also gets a cap
        let mut num = 0.0f64;
        let mut den = 0.0f64;
        for seed in 0..25 {
            let spec = InstanceSpec {
                channels: 8,
                heads: 2,
                levels: 2,
                points: 2,
                queries: 64,
                base_extent: 8,
                offset_envelope: 0.03,
            };
            let (pyramid, batch, weights) = random_instance(&spec, seed);
            let q = msdeformattn_fused_quantized(&pyramid, &batch, &weights, &QuantizerConfig::default())
                .unwrap();
            let f = msdeformattn_fused(&pyramid, &batch, &weights).unwrap();
            let err = l2_rel_error(q.output.data(), f.data());
            assert!(err <= 1.5e-2, "seed {seed}: relative L2 error {err}");
            num += q
                .output
                .data()
                .iter()
                .zip(f.data())
                .map(|(&x, &y)| ((x - y) as f64).powi(2))
                .sum::<f64>();
            den += f.data().iter().map(|&y| (y as f64).powi(2)).sum::<f64>();
        }
        let pooled = (num / den).sqrt();
        assert!(pooled <= 1e-2, "pooled relative L2 error {pooled}");
    }

    #[test]
    fn adversarial_magnitudes_saturate_without_wraparound() {
        // push every stage to its format extreme: full-scale features and
        // weights with wide channels so the 18-bit projection accumulator
        // must clamp
        let d = 32;
        let heads = 2;
        let mut data = vec![0.0f32; 8 * 8 * d];
        for (i, v) in data.iter_mut().enumerate() {
            *v = if i % 2 == 0 { 1.0 } else { -1.0 };
        }
        let map = FeatureMap::new(8, 8, d, data).unwrap();
        let pyramid = FeaturePyramid::new(vec![map]).unwrap();
        let samples = heads * 2; // L=1, K=2
        let batch = QueryBatch::new(
            vec![0],
            vec![[0.5, 0.5]],
            vec![[0.0, 0.0]; samples],
            vec![0.0; samples],
            heads,
            1,
            2,
        )
        .unwrap();
        let head_dim = d / heads;
        let value: Vec<f32> = (0..heads * head_dim * d).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let output: Vec<f32> = (0..heads * d * head_dim).map(|i| if i % 3 == 0 { 1.0 } else { -1.0 }).collect();
        let weights = fold_projections(&ProjectionWeights::new(d, heads, value, output).unwrap());

        let q = msdeformattn_fused_quantized(&pyramid, &batch, &weights, &QuantizerConfig::default()).unwrap();
        assert!(q.saturation.projection_accum > 0, "expected projection saturation: {:?}", q.saturation);
        // clamping, never wraparound: outputs bounded by the accumulator range
        let lin = PrecisionPlan::default().accum_fmt_linear;
        let bound = lin.max_code() as f64
            * q.scales.weights.iter().cloned().fold(0.0, f64::max)
            * q.scales.aggregates.iter().cloned().fold(0.0, f64::max)
            + 1.0;
        for &v in q.output.data() {
            assert!((v as f64).abs() <= bound, "output {v} exceeds clamp bound {bound}");
        }

        // the same instance with a non-saturating accumulator is an error
        // naming the stage
        let mut plan = PrecisionPlan::default();
        plan.accum_fmt_linear.saturating = false;
        let config = QuantizerConfig { plan, ..QuantizerConfig::default() };
        let err = msdeformattn_fused_quantized(&pyramid, &batch, &weights, &config).unwrap_err();
        assert!(matches!(err, Error::Overflow { stage: Stage::Projection, .. }), "got {err:?}");
    }

    #[test]
    fn plan_validation_pins_bit_widths() {
        assert!(PrecisionPlan::default().validate().is_ok());
        let mut plan = PrecisionPlan::default();
        plan.accum_fmt_linear.total_bits = 16;
        assert!(plan.validate().is_err());
    }

    #[test]
    fn fused_quantized_requires_folded_weights() {
        let (pyramid, batch, weights) = exact_instance();
        let unfolded = ProjectionWeights::new(
            weights.channels(),
            weights.heads(),
            weights.value_proj(0).iter().chain(weights.value_proj(1)).copied().collect(),
            weights.output_proj(0).iter().chain(weights.output_proj(1)).copied().collect(),
        )
        .unwrap();
        assert!(matches!(
            msdeformattn_fused_quantized(&pyramid, &batch, &unfolded, &QuantizerConfig::default()),
            Err(Error::MissingFolded)
        ));
    }
}
