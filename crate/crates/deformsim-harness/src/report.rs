//! Report emission: CSV and JSON-lines with a stable column order and floats
//! at 9 significant digits, plus a sidecar metadata file. Timestamps live
//! only in the sidecar, so report bodies are byte-identical across runs of
//! the same config.

use std::io::Write;
use std::path::Path;

use crate::experiment::ReportRow;
use crate::{HarnessError, Result};

/// Column order of the report schema, shared by CSV and JSON-lines.
pub const COLUMNS: &[&str] = &[
    "sweep_parameter",
    "sweep_value",
    "seed",
    "policy",
    "window",
    "rho",
    "queries",
    "accesses",
    "hits",
    "misses",
    "hit_rate",
    "fetched_lines",
    "stall_cycles",
    "covered_cycles",
    "cold_start_cycles",
    "total_cycles",
    "energy_pj",
    "regional_reuse",
    "bank_conflicts",
    "baseline_hit_rate",
    "baseline_stall_cycles",
    "baseline_total_cycles",
    "baseline_fetched_lines",
    "baseline_energy_pj",
    "speedup_vs_baseline",
    "quant_error",
    "quant_saturation",
];

/// Formats a float with 9 significant digits.
pub fn format_float(value: f64) -> String {
    if value == 0.0 {
        return "0".to_string();
    }
    format!("{value:.8e}")
}

/// Rounds to the 9-significant-digit grid used by the CSV writer.
pub fn round_float(value: f64) -> f64 {
    format_float(value).parse().expect("formatted float parses")
}

fn row_fields(row: &ReportRow) -> Vec<String> {
    vec![
        row.sweep_parameter.clone(),
        format_float(row.sweep_value),
        row.seed.to_string(),
        row.policy.clone(),
        row.window.to_string(),
        format_float(row.rho),
        row.queries.to_string(),
        row.accesses.to_string(),
        row.hits.to_string(),
        row.misses.to_string(),
        format_float(row.hit_rate),
        row.fetched_lines.to_string(),
        row.stall_cycles.to_string(),
        row.covered_cycles.to_string(),
        row.cold_start_cycles.to_string(),
        row.total_cycles.to_string(),
        format_float(row.energy_pj),
        format_float(row.regional_reuse),
        row.bank_conflicts.to_string(),
        format_float(row.baseline_hit_rate),
        row.baseline_stall_cycles.to_string(),
        row.baseline_total_cycles.to_string(),
        row.baseline_fetched_lines.to_string(),
        format_float(row.baseline_energy_pj),
        format_float(row.speedup_vs_baseline),
        row.quant_error.map(format_float).unwrap_or_default(),
        row.quant_saturation.map(|v| v.to_string()).unwrap_or_default(),
    ]
}

/// Renders the CSV body (header + one line per row).
pub fn render_csv(rows: &[ReportRow]) -> String {
    let mut out = String::new();
    out.push_str(&COLUMNS.join(","));
    out.push('\n');
    for row in rows {
        out.push_str(&row_fields(row).join(","));
        out.push('\n');
    }
    out
}

/// Renders JSON-lines: one object per row, keys in column order, floats on
/// the same 9-significant-digit grid as the CSV.
pub fn render_jsonl(rows: &[ReportRow]) -> String {
    let mut out = String::new();
    for row in rows {
        let mut map = serde_json::Map::new();
        let fields = row_fields(row);
        for (key, (field, raw)) in COLUMNS.iter().zip(fields.iter().zip(raw_kinds(row))) {
            map.insert(key.to_string(), raw.to_json(field));
        }
        out.push_str(&serde_json::Value::Object(map).to_string());
        out.push('\n');
    }
    out
}

enum FieldKind {
    Text,
    Int,
    Float,
    OptionalFloat,
    OptionalInt,
}

impl FieldKind {
    fn to_json(&self, field: &str) -> serde_json::Value {
        match self {
            FieldKind::Text => serde_json::Value::String(field.to_string()),
            FieldKind::Int => serde_json::Value::from(field.parse::<i64>().unwrap_or_default()),
            FieldKind::Float => serde_json::json!(field.parse::<f64>().unwrap_or_default()),
            FieldKind::OptionalFloat => {
                if field.is_empty() {
                    serde_json::Value::Null
                } else {
                    serde_json::json!(field.parse::<f64>().unwrap_or_default())
                }
            }
            FieldKind::OptionalInt => {
                if field.is_empty() {
                    serde_json::Value::Null
                } else {
                    serde_json::Value::from(field.parse::<i64>().unwrap_or_default())
                }
            }
        }
    }
}

fn raw_kinds(_row: &ReportRow) -> Vec<FieldKind> {
    use FieldKind::*;
    vec![
        Text, Float, Int, Text, Int, Float, Int, Int, Int, Int, Float, Int, Int, Int, Int, Int, Float,
        Float, Int, Float, Int, Int, Int, Float, Float, OptionalFloat, OptionalInt,
    ]
}

/// Writes the report plus a `<path>.meta.json` sidecar carrying the
/// timestamp and tool version.
pub fn emit_report(rows: &[ReportRow], format: &str, path: &Path) -> Result<()> {
    if rows.is_empty() {
        return Err(HarnessError::config("rows", "refusing to emit an empty report"));
    }
    let body = match format {
        "csv" => render_csv(rows),
        "jsonl" => render_jsonl(rows),
        other => return Err(HarnessError::config("output.format", format!("unknown format '{other}'"))),
    };
    let mut file = std::fs::File::create(path).map_err(|e| HarnessError::io(path, e))?;
    file.write_all(body.as_bytes()).map_err(|e| HarnessError::io(path, e))?;

    let meta = serde_json::json!({
        "tool": "deformsim-harness",
        "version": env!("CARGO_PKG_VERSION"),
        "created_unix_seconds": std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or_default(),
        "rows": rows.len(),
        "format": format,
    });
    let meta_path = path.with_extension(match path.extension().and_then(|e| e.to_str()) {
        Some(ext) => format!("{ext}.meta.json"),
        None => "meta.json".to_string(),
    });
    std::fs::write(&meta_path, meta.to_string()).map_err(|e| HarnessError::io(&meta_path, e))?;
    Ok(())
}
