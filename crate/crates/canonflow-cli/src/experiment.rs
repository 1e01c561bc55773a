//! Experiment assembly: one structured config file drives every subcommand.
//!
//! The file is TOML; a manifest.json written by a previous run works too
//! (its embedded experiment table is extracted). Flags win over file keys,
//! `--override` edits apply in between.

use std::fs;
use std::path::{Path, PathBuf};

use canonflow::{apply_override, config_from_value, CanonError, FlowConfig, Result};
use serde::{Deserialize, Serialize};

use crate::CommonArgs;

const DEFAULT_HEAT_TIMES: [f64; 3] = [0.02, 0.01, 0.005];

/// Heat study parameters, the `[heat]` table of the config.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeatParams {
    /// Heat times; the study runs them largest first.
    pub t: Vec<f64>,
    /// Spectral truncation. Absent: full spectrum (analytic mode list on
    /// untwisted bundles).
    pub modes: Option<usize>,
    /// Constant scalar shift added to the operator as W = w I.
    pub w: f64,
}

impl Default for HeatParams {
    fn default() -> Self {
        HeatParams { t: DEFAULT_HEAT_TIMES.to_vec(), modes: None, w: 0.0 }
    }
}

/// The assembled experiment: flow keys stay as a TOML table so per-seed
/// configs can be stamped out without cloning typed state.
#[derive(Debug, Clone)]
pub struct Experiment {
    base: toml::value::Table,
    pub seeds: Vec<u64>,
    pub heat: HeatParams,
    pub out: Option<PathBuf>,
}

fn as_u64(v: &toml::Value, what: &str) -> Result<u64> {
    v.as_integer()
        .filter(|&i| i >= 0)
        .map(|i| i as u64)
        .ok_or_else(|| CanonError::Config(format!("{what} must be a non-negative integer")))
}

impl Experiment {
    pub fn assemble(args: &CommonArgs) -> Result<Experiment> {
        let mut root = match &args.config {
            Some(p) => load_root(p)?,
            None => toml::Value::Table(Default::default()),
        };
        for ov in &args.overrides {
            apply_override(&mut root, ov)?;
        }
        let mut base = match root {
            toml::Value::Table(t) => t,
            _ => return Err(CanonError::Config("config root is not a table".into())),
        };

        let out = match &args.out {
            Some(p) => Some(p.clone()),
            None => base
                .remove("out")
                .map(|v| {
                    v.as_str().map(PathBuf::from).ok_or_else(|| {
                        CanonError::Config("out must be a path string".into())
                    })
                })
                .transpose()?,
        };

        let heat: HeatParams = match base.remove("heat") {
            Some(v) => v
                .try_into()
                .map_err(|e| CanonError::Config(format!("heat table: {e}")))?,
            None => HeatParams::default(),
        };

        let seeds: Vec<u64> = if let Some(s) = args.seed {
            vec![s]
        } else if let Some(v) = base.remove("seeds") {
            let arr = v
                .as_array()
                .ok_or_else(|| CanonError::Config("seeds must be an array".into()))?;
            if arr.is_empty() {
                return Err(CanonError::Config("seeds is empty".into()));
            }
            arr.iter().map(|s| as_u64(s, "seeds entry")).collect::<Result<_>>()?
        } else if let Some(v) = base.get("seed") {
            vec![as_u64(v, "seed")?]
        } else {
            vec![1]
        };

        // The per-seed stamp overwrites this, but a bare geometry table
        // should already deserialize.
        if args.seed.is_some() || !base.contains_key("seed") {
            base.insert("seed".into(), toml::Value::Integer(seeds[0] as i64));
        }

        Ok(Experiment { base, seeds, heat, out })
    }

    /// Flow config for one seed of the sweep.
    pub fn flow_config(&self, seed: u64) -> Result<FlowConfig> {
        let mut t = self.base.clone();
        t.insert("seed".into(), toml::Value::Integer(seed as i64));
        config_from_value(toml::Value::Table(t))
    }

    /// Whether the user supplied any geometry at all.
    pub fn has_geometry(&self) -> bool {
        self.base.contains_key("m") || self.base.contains_key("n")
    }

    /// Loose geometry view for commands that only need the bundle: reads
    /// m, n, k, twist and ignores flow-only keys.
    pub fn geometry(&self, default_n: usize) -> Result<GeometrySpec> {
        let get_usize = |key: &str, dflt: usize| -> Result<usize> {
            match self.base.get(key) {
                None => Ok(dflt),
                Some(v) => Ok(as_u64(v, key)? as usize),
            }
        };
        let m = get_usize("m", 1)?;
        let n = get_usize("n", default_n)?;
        let k = get_usize("k", 1)?;
        let entries: Vec<TwistKey> = match self.base.get("twist") {
            None => Vec::new(),
            Some(v) => v
                .clone()
                .try_into()
                .map_err(|e| CanonError::Config(format!("twist: {e}")))?,
        };
        let axes = 2 * m;
        let mut full = vec![0i64; axes * axes];
        for e in &entries {
            if e.mu >= axes || e.nu >= axes || e.mu >= e.nu {
                return Err(CanonError::Config(format!(
                    "twist entry ({}, {}) is not an ordered pair below {axes}",
                    e.mu, e.nu
                )));
            }
            full[e.mu * axes + e.nu] = e.c;
            full[e.nu * axes + e.mu] = -e.c;
        }
        let twist = canonflow::geometry::Twist::new(axes, full)?;
        Ok(GeometrySpec { m, n, k, twist })
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct TwistKey {
    mu: usize,
    nu: usize,
    c: i64,
}

#[derive(Debug, Clone)]
pub struct GeometrySpec {
    pub m: usize,
    pub n: usize,
    pub k: usize,
    pub twist: canonflow::geometry::Twist,
}

fn load_root(path: &Path) -> Result<toml::Value> {
    let text = fs::read_to_string(path)
        .map_err(|e| CanonError::Config(format!("cannot read {}: {e}", path.display())))?;
    if path.extension().is_some_and(|e| e == "json") {
        let v: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| CanonError::Config(format!("{}: {e}", path.display())))?;
        let obj = v
            .as_object()
            .ok_or_else(|| CanonError::Config("manifest root is not an object".into()))?;
        let exp = obj
            .get("experiment")
            .or_else(|| obj.get("config"))
            .unwrap_or(&v);
        return json_to_toml(exp);
    }
    text.parse::<toml::Value>()
        .map_err(|e| CanonError::Config(format!("{}: {e}", path.display())))
}

/// Manifests are JSON; configs are TOML. Null values mean "key absent".
fn json_to_toml(v: &serde_json::Value) -> Result<toml::Value> {
    use serde_json::Value as J;
    Ok(match v {
        J::Null => return Err(CanonError::Config("null has no TOML form".into())),
        J::Bool(b) => toml::Value::Boolean(*b),
        J::Number(n) => {
            if let Some(i) = n.as_i64() {
                toml::Value::Integer(i)
            } else if let Some(f) = n.as_f64() {
                toml::Value::Float(f)
            } else {
                return Err(CanonError::Config(format!("number {n} overflows")));
            }
        }
        J::String(s) => toml::Value::String(s.clone()),
        J::Array(a) => toml::Value::Array(a.iter().map(json_to_toml).collect::<Result<_>>()?),
        J::Object(o) => {
            let mut t = toml::value::Table::new();
            for (k, val) in o {
                if !val.is_null() {
                    t.insert(k.clone(), json_to_toml(val)?);
                }
            }
            toml::Value::Table(t)
        }
    })
}
