//! Run configuration: a TOML file of dotted keys (`model.f = 32`) layered
//! over defaults, then `--set key=value` overrides. Keys outside the schema
//! are rejected.

use std::collections::BTreeMap;
use std::path::Path;

use ctxfuse::data::SynthConfig;
use ctxfuse::model::ModelConfig;
use ctxfuse::train::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{CliError, CliResult};

/// Which ablation cells `ablate` trains.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Grid {
    /// Context and fusion strategies at the configured window.
    Strategy,
    /// Context window sizes with the full model.
    Window,
    #[default]
    All,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateConfig {
    /// Number of seeds per cell, counted up from `--seed`.
    pub seeds: usize,
    pub grid: Grid,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self { seeds: 3, grid: Grid::All }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data: SynthConfig,
    pub train: TrainConfig,
    pub ablate: AblateConfig,
}

/// Model input widths follow the data and are not settable on their own.
const DERIVED_KEYS: [&str; 2] = ["model.d_t", "model.d_a"];

fn flatten(prefix: &str, value: Value, out: &mut BTreeMap<String, Value>) {
    match value {
        Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() { k } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        leaf => {
            out.insert(prefix.to_string(), leaf);
        }
    }
}

fn unflatten(flat: &BTreeMap<String, Value>) -> Value {
    let mut root = Map::new();
    for (key, v) in flat {
        let mut node = &mut root;
        let mut parts = key.split('.').peekable();
        while let Some(part) = parts.next() {
            if parts.peek().is_none() {
                node.insert(part.to_string(), v.clone());
            } else {
                node = node
                    .entry(part)
                    .or_insert_with(|| Value::Object(Map::new()))
                    .as_object_mut()
                    .expect("schema keys never nest under leaves");
            }
        }
    }
    Value::Object(root)
}

fn decode(flat: &BTreeMap<String, Value>) -> Result<RunConfig, serde_json::Error> {
    serde_json::from_value(unflatten(flat))
}

/// Parses an override value as a TOML literal, falling back to a bare string
/// so that `model.gate=fixed` works unquoted.
fn parse_literal(raw: &str) -> Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .and_then(|v| serde_json::to_value(v).ok())
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

pub fn parse_override(raw: &str) -> CliResult<(String, Value)> {
    match raw.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), parse_literal(v.trim()))),
        _ => Err(CliError::Usage(format!("--set expects key=value, got `{raw}`"))),
    }
}

pub struct Resolver {
    flat: BTreeMap<String, Value>,
}

impl Default for Resolver {
    fn default() -> Self {
        let mut flat = BTreeMap::new();
        flatten("", serde_json::to_value(RunConfig::default()).expect("defaults serialize"), &mut flat);
        for k in DERIVED_KEYS {
            flat.remove(k);
        }
        Self { flat }
    }
}

impl Resolver {
    /// Sets one key, checking that it exists and that the value has its type.
    pub fn set(&mut self, key: &str, value: Value) -> CliResult<()> {
        if !self.flat.contains_key(key) {
            let hint = if DERIVED_KEYS.contains(&key) {
                " (model input widths follow data.d_t and data.d_a)"
            } else {
                ""
            };
            return Err(CliError::Config(format!("unknown key `{key}`{hint}")));
        }
        let previous = self.flat.insert(key.to_string(), value);
        if let Err(e) = decode(&self.with_derived()) {
            self.flat.insert(key.to_string(), previous.expect("key exists"));
            return Err(CliError::Config(format!("key `{key}`: {e}")));
        }
        Ok(())
    }

    pub fn load_file(&mut self, path: &Path) -> CliResult<()> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let table: toml::Table = toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut flat = BTreeMap::new();
        flatten("", serde_json::to_value(table).map_err(|e| CliError::Config(e.to_string()))?, &mut flat);
        flat.into_iter().try_for_each(|(k, v)| self.set(&k, v))
    }

    fn with_derived(&self) -> BTreeMap<String, Value> {
        let mut flat = self.flat.clone();
        for (model, data) in [("model.d_t", "data.d_t"), ("model.d_a", "data.d_a")] {
            flat.insert(model.into(), flat[data].clone());
        }
        flat
    }

    pub fn finish(&self) -> CliResult<RunConfig> {
        let cfg = decode(&self.with_derived()).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.model.validate()?;
        cfg.data.validate()?;
        cfg.train.validate()?;
        if cfg.ablate.seeds == 0 {
            return Err(CliError::Config("ablate.seeds must be at least 1".into()));
        }
        Ok(cfg)
    }
}

/// Defaults, then the file, then the overrides in order.
pub fn resolve(file: Option<&Path>, overrides: &[String]) -> CliResult<RunConfig> {
    let mut r = Resolver::default();
    if let Some(path) = file {
        r.load_file(path)?;
    }
    for raw in overrides {
        let (k, v) = parse_override(raw)?;
        r.set(&k, v)?;
    }
    r.finish()
}
