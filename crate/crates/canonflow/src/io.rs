//! Trace and configuration serialization.
//!
//! Traces emit CSV with the frozen column order of
//! [`crate::dynamics::TRACE_COLUMNS`]; floats use the shortest
//! round-tripping form so re-runs are byte-identical. Wall-clock timing
//! never reaches the serialized forms. The JSON manifest carries enough
//! to reproduce a run: full config, seed, content hash, build version,
//! and the stopping data.

use std::fmt::Write as FmtWrite;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::dynamics::{FlowConfig, FlowTrace, StopReason, TraceRow, TRACE_COLUMNS};
use crate::error::{CanonError, Result};
use crate::sections::ADMISSIBLE_TOL;

/// Build identity baked in by the binary's build script; the library
/// falls back to its package version.
pub fn build_version() -> &'static str {
    match option_env!("GIT_DESCRIBE") {
        Some(v) => v,
        None => env!("CARGO_PKG_VERSION"),
    }
}

fn push_f64(out: &mut String, v: f64) {
    // shortest round-trip form; NaN marks a monitor that was off
    let _ = write!(out, "{v:?}");
}

fn push_row(out: &mut String, r: &TraceRow) {
    let _ = write!(out, "{},{},{}", r.iteration, r.seed, r.config_hash);
    for v in [
        r.phi01,
        r.phi10,
        r.phi,
        r.phi01_g,
        r.min_sv_pi,
        r.stability_constant,
        r.f02_can_l2,
        r.hodge02_re,
        r.hodge02_im,
        r.hodge02_norm_sq,
        r.phi01_phi,
        r.curvature_bound_max,
        r.lq_p,
        r.lq_mid,
        r.lq_inf,
        r.soliton_residual,
    ] {
        out.push(',');
        push_f64(out, v);
    }
    let _ = write!(out, ",{}", r.terminated);
    out.push('\n');
}

/// Render a trace as CSV, header first.
pub fn trace_to_csv(trace: &FlowTrace) -> String {
    let mut out = String::with_capacity(256 * (trace.rows.len() + 1));
    out.push_str(&TRACE_COLUMNS.join(","));
    out.push('\n');
    for r in &trace.rows {
        push_row(&mut out, r);
    }
    out
}

/// Reproducibility record written next to every trace.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest<'a> {
    pub tool: &'static str,
    pub version: &'static str,
    pub seed: u64,
    pub config_hash: &'a str,
    pub config: &'a FlowConfig,
    pub columns: [&'static str; 20],
    pub tolerances: ManifestTolerances,
    pub stop: StopReason,
    pub iterations: usize,
    pub terminated: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ManifestTolerances {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub admissible_tol: f64,
}

impl<'a> RunManifest<'a> {
    pub fn new(config: &'a FlowConfig, trace: &'a FlowTrace) -> Self {
        RunManifest {
            tool: "canonflow",
            version: build_version(),
            seed: trace.seed,
            config_hash: &trace.config_hash,
            config,
            columns: TRACE_COLUMNS,
            tolerances: ManifestTolerances {
                abs_tol: config.abs_tol,
                rel_tol: config.rel_tol,
                admissible_tol: ADMISSIBLE_TOL,
            },
            stop: trace.stop,
            iterations: trace.rows.last().map_or(0, |r| r.iteration),
            terminated: trace.stop == StopReason::Terminated,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }
}

/// Write trace.csv and manifest.json into a directory, creating it.
pub fn write_run(dir: &Path, config: &FlowConfig, trace: &FlowTrace) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("trace.csv"), trace_to_csv(trace))?;
    let manifest = RunManifest::new(config, trace);
    let mut json = manifest.to_json();
    json.push('\n');
    fs::write(dir.join("manifest.json"), json)?;
    Ok(())
}

/// Read a TOML flow config; unknown keys are rejected.
pub fn load_config(path: &Path) -> Result<FlowConfig> {
    let text = fs::read_to_string(path)?;
    let value: toml::Value = text
        .parse()
        .map_err(|e| CanonError::Config(format!("{}: {e}", path.display())))?;
    config_from_value(value)
}

/// Deserialize a TOML value into a validated config.
pub fn config_from_value(value: toml::Value) -> Result<FlowConfig> {
    let cfg: FlowConfig = value
        .try_into()
        .map_err(|e| CanonError::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Apply one `key=value` override onto a TOML tree, creating nested
/// tables along dotted paths. Values parse as TOML scalars, falling back
/// to strings, so `monitors.hodge=true`, `eps=1e-3`, and `system=t-eps`
/// all work.
pub fn apply_override(root: &mut toml::Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| CanonError::Config(format!("override '{spec}' is not key=value")))?;
    let path = path.trim();
    let raw = raw.trim();
    if path.is_empty() {
        return Err(CanonError::Config(format!("override '{spec}' has no key")));
    }
    // parse the value as a TOML scalar by wrapping it in a document;
    // anything unparseable is taken as a bare string
    let leaf: toml::Value = match format!("v = {raw}").parse::<toml::Value>() {
        Ok(doc) => doc.get("v").cloned().unwrap_or(toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let mut node = root;
    let parts: Vec<&str> = path.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| CanonError::Config(format!("override path '{path}' crosses a non-table")))?;
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| CanonError::Config(format!("override path '{path}' crosses a non-table")))?;
    table.insert(parts[parts.len() - 1].to_string(), leaf);
    Ok(())
}
