//! Experiment configuration: a versioned, hierarchical TOML file.
//!
//! All run state lives in the file plus explicit `--set` overrides;
//! environment variables are never read, so a config file pins a run
//! completely. Dotted-path overrides (`--set scheduler.window=64`) are
//! applied to the parsed TOML before deserialization.

use serde::{Deserialize, Serialize};

use deformsim::cache::{CachePolicy, DEFAULT_ENERGY_PER_BIT_PJ};
use deformsim::workload::{Distribution, WorkloadMode, WorkloadSpec};

use crate::{HarnessError, Result};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub seeds: Vec<u64>,
    pub workload: WorkloadConfig,
    pub scheduler: SchedulerSection,
    pub geometry: GeometrySection,
    #[serde(default)]
    pub timing: TimingSection,
    #[serde(default)]
    pub precision: PrecisionSection,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadConfig {
    /// dense_encoder | sparse_encoder | decoder
    pub mode: String,
    #[serde(default = "default_rho")]
    pub rho: f64,
    #[serde(default = "default_n_d")]
    pub n_d: usize,
    pub levels: Vec<(usize, usize)>,
    pub channels: usize,
    pub heads: usize,
    pub points: usize,
    /// uniform | clustered | grid
    #[serde(default = "default_distribution")]
    pub distribution: String,
    #[serde(default = "default_clusters")]
    pub clusters: usize,
    #[serde(default = "default_spread")]
    pub spread: f64,
    #[serde(default = "default_envelope")]
    pub offset_envelope: f32,
}

fn default_rho() -> f64 {
    1.0
}
fn default_n_d() -> usize {
    300
}
fn default_distribution() -> String {
    "uniform".into()
}
fn default_clusters() -> usize {
    8
}
fn default_spread() -> f64 {
    0.02
}
fn default_envelope() -> f32 {
    0.02
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchedulerSection {
    pub window: usize,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
}

fn default_parallelism() -> usize {
    8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometrySection {
    /// dooq_pingpong | direct_mapped
    #[serde(default = "default_policy")]
    pub policy: String,
    pub capacity_lines: usize,
    #[serde(default = "default_banks")]
    pub banks: usize,
    #[serde(default = "default_bytes_per_element")]
    pub bytes_per_element: usize,
}

fn default_policy() -> String {
    "dooq_pingpong".into()
}
fn default_banks() -> usize {
    8
}
fn default_bytes_per_element() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TimingSection {
    pub t_fetch_per_line: u64,
    /// Defaults to `L * K * ceil(D / p_d)` when absent.
    pub t_comp_per_query: Option<u64>,
    pub energy_per_bit_pj: f64,
    /// Cycles charged per same-bank tap pair. Bank conflicts are a counted
    /// diagnostic by default (penalty 0).
    pub bank_penalty_cycles: u64,
}

impl Default for TimingSection {
    fn default() -> Self {
        Self {
            t_fetch_per_line: 4,
            t_comp_per_query: None,
            energy_per_bit_pj: DEFAULT_ENERGY_PER_BIT_PJ,
            bank_penalty_cycles: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct PrecisionSection {
    /// When true, each sweep point also runs the quantized fused path and
    /// reports its relative L2 error against the floating path.
    pub enabled: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    /// none | window | rho | capacity_lines
    pub parameter: String,
    pub values: Vec<f64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self { parameter: "none".into(), values: vec![] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub path: String,
    /// csv | jsonl
    pub format: String,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { path: "report.csv".into(), format: "csv".into() }
    }
}

/// Sweepable parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParameter {
    None,
    Window,
    Rho,
    CapacityLines,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut value: toml::Value = text.parse()?;
        for (path, raw) in overrides {
            apply_override(&mut value, path, raw)?;
        }
        let config: ExperimentConfig =
            value.try_into().map_err(HarnessError::Parse)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &std::path::Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_toml_str(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(HarnessError::config(
                "version",
                format!("unsupported config version {} (expected {CONFIG_VERSION})", self.version),
            ));
        }
        if self.seeds.is_empty() {
            return Err(HarnessError::config("seeds", "seed list must not be empty"));
        }
        self.sweep_parameter()?;
        self.workload_mode()?;
        self.distribution()?;
        self.cache_policy()?;
        match self.output.format.as_str() {
            "csv" | "jsonl" => {}
            other => {
                return Err(HarnessError::config("output.format", format!("unknown format '{other}'")));
            }
        }
        if self.scheduler.window == 0 || self.scheduler.parallelism == 0 {
            return Err(HarnessError::config("scheduler", "window and parallelism must be >= 1"));
        }
        if self.timing.t_fetch_per_line == 0 {
            return Err(HarnessError::config("timing.t_fetch_per_line", "must be >= 1"));
        }
        // exercise workload validation early for a field-level error
        self.workload_spec(self.seeds[0])
            .validate()
            .map_err(|e| HarnessError::config("workload", e.to_string()))?;
        Ok(())
    }

    pub fn sweep_parameter(&self) -> Result<SweepParameter> {
        match self.sweep.parameter.as_str() {
            "none" => Ok(SweepParameter::None),
            "window" => Ok(SweepParameter::Window),
            "rho" => Ok(SweepParameter::Rho),
            "capacity_lines" => Ok(SweepParameter::CapacityLines),
            other => Err(HarnessError::config(
                "sweep.parameter",
                format!("unknown sweep parameter '{other}' (expected none|window|rho|capacity_lines)"),
            )),
        }
    }

    pub fn workload_mode(&self) -> Result<WorkloadMode> {
        match self.workload.mode.as_str() {
            "dense_encoder" => Ok(WorkloadMode::DenseEncoder),
            "sparse_encoder" => Ok(WorkloadMode::SparseEncoder { rho: self.workload.rho }),
            "decoder" => Ok(WorkloadMode::Decoder { n_d: self.workload.n_d }),
            other => Err(HarnessError::config("workload.mode", format!("unknown mode '{other}'"))),
        }
    }

    pub fn distribution(&self) -> Result<Distribution> {
        match self.workload.distribution.as_str() {
            "uniform" => Ok(Distribution::Uniform),
            "grid" => Ok(Distribution::Grid),
            "clustered" => Ok(Distribution::Clustered {
                clusters: self.workload.clusters,
                spread: self.workload.spread,
            }),
            other => {
                Err(HarnessError::config("workload.distribution", format!("unknown distribution '{other}'")))
            }
        }
    }

    pub fn cache_policy(&self) -> Result<CachePolicy> {
        match self.geometry.policy.as_str() {
            "dooq_pingpong" => Ok(CachePolicy::DooqPingpong),
            "direct_mapped" => Ok(CachePolicy::DirectMapped),
            other => Err(HarnessError::config("geometry.policy", format!("unknown policy '{other}'"))),
        }
    }

    /// Workload spec for one seed (mode/distribution already validated).
    pub fn workload_spec(&self, seed: u64) -> WorkloadSpec {
        WorkloadSpec {
            mode: self.workload_mode().unwrap_or(WorkloadMode::DenseEncoder),
            levels: self.workload.levels.clone(),
            channels: self.workload.channels,
            heads: self.workload.heads,
            points: self.workload.points,
            distribution: self.distribution().unwrap_or(Distribution::Uniform),
            offset_envelope: self.workload.offset_envelope,
            seed,
        }
    }

    /// Effective compute cycles per query.
    pub fn t_comp_per_query(&self) -> u64 {
        self.timing.t_comp_per_query.unwrap_or_else(|| {
            deformsim::cache::TimingConfig::default_compute_cycles(
                self.workload.levels.len(),
                self.workload.points,
                self.workload.channels,
                self.scheduler.parallelism,
            )
        })
    }
}

/// Applies one `--set path.to.field=value` override to parsed TOML.
fn apply_override(root: &mut toml::Value, path: &str, raw: &str) -> Result<()> {
    let segments: Vec<&str> = path.split('.').collect();
    if segments.is_empty() || segments.iter().any(|s| s.is_empty()) {
        return Err(HarnessError::config(path, "empty override path segment"));
    }
    let mut node = root;
    for segment in &segments[..segments.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| HarnessError::config(path, format!("'{segment}' is not a table")))?;
        node = table
            .entry(segment.to_string())
            .or_insert_with(|| toml::Value::Table(toml::map::Map::new()));
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| HarnessError::config(path, "override target is not a table"))?;
    // parse the raw value as TOML so numbers, bools, arrays and strings all work
    let parsed: toml::Value = format!("v = {raw}")
        .parse::<toml::Value>()
        .ok()
        .and_then(|v| v.get("v").cloned())
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    table.insert(segments[segments.len() - 1].to_string(), parsed);
    Ok(())
}

/// A ready-to-run desk-scale clustered config (used by docs and tests).
pub fn example_config_toml() -> String {
    r#"version = 1
seeds = [1, 2, 3]

[workload]
mode = "decoder"
n_d = 2048
levels = [[64, 64], [32, 32], [16, 16], [8, 8]]
channels = 32
heads = 4
points = 4
distribution = "clustered"
clusters = 8
spread = 0.02
offset_envelope = 0.02

[scheduler]
window = 64
parallelism = 8

[geometry]
policy = "dooq_pingpong"
capacity_lines = 512
banks = 8
bytes_per_element = 4

[timing]
t_fetch_per_line = 4
energy_per_bit_pj = 1.21

[precision]
enabled = false

[sweep]
parameter = "window"
values = [1, 8, 64, 512]

[output]
path = "report.csv"
format = "csv"
"#
    .to_string()
}
