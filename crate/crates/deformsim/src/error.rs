//! Error type shared by all simulator modules.

use thiserror::Error;

/// Pipeline stage names used in overflow and saturation reporting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    /// Bilinear tap accumulation (linear path).
    BilinearAccum,
    /// Re-quantization of bilinear outputs to 8-bit activations.
    BilinearRequant,
    /// Fixed-point softmax (exp, sum, divide).
    Softmax,
    /// Attention-weighted aggregation accumulation (aggregation path).
    Aggregation,
    /// Re-quantization of aggregated head vectors to 8-bit activations.
    AggregationRequant,
    /// Folded projection accumulation (linear path).
    Projection,
    /// Input tensor quantization.
    InputQuant,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Stage::BilinearAccum => "bilinear-accumulate",
            Stage::BilinearRequant => "bilinear-requantize",
            Stage::Softmax => "softmax",
            Stage::Aggregation => "aggregation-accumulate",
            Stage::AggregationRequant => "aggregation-requantize",
            Stage::Projection => "projection-accumulate",
            Stage::InputQuant => "input-quantize",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    /// Rejected input: a value that must be finite was NaN or infinite.
    #[error("rejected input: non-finite {context}")]
    NonFinite { context: &'static str },

    /// Rejected input: an empty collection where at least one element is required.
    #[error("rejected input: empty {context}")]
    Empty { context: &'static str },

    /// Inconsistent shapes or sizes between arguments.
    #[error("configuration error: {0}")]
    Config(String),

    /// Fused evaluation requested without folded projection weights.
    #[error("configuration error: folded projection weights missing")]
    MissingFolded,

    /// A caller violated an operation contract (e.g. out-of-range argument).
    #[error("contract violation: {context} (got {value})")]
    ContractViolation { context: &'static str, value: f64 },

    /// Fixed-point accumulator overflow with saturation disabled.
    #[error("overflow at stage {stage}: value {value} exceeds {bits}-bit range")]
    Overflow { stage: Stage, value: i64, bits: u32 },

    /// A prefetch region does not fit in one ping-pong buffer.
    #[error(
        "configuration error: prefetch region at level {level} (radius {radius}) \
         needs {region_lines} lines; one ping-pong buffer holds {buffer_lines}"
    )]
    RegionOverflow { level: usize, radius: usize, region_lines: usize, buffer_lines: usize },

    /// An attention output carried a query id unknown to the index remap.
    #[error("data corruption: unknown query id {0}")]
    UnknownId(u64),
}
