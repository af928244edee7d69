//! Run configuration: a sectioned TOML file, then `key=value` overrides.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use tapseg::data::{DatasetSpec, Split};
use tapseg::guidance::{GuidanceConfig, GuidanceKind};
use tapseg::model::{ModelConfig, Scale, Variant};
use tapseg::train::TrainConfig;
use toml::Value;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub variant: Variant,
    pub scale: Scale,
    /// Weight initialization seed.
    pub seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection { variant: Variant::Multi, scale: Scale::Tiny, seed: 0 }
    }
}

impl ModelSection {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig::for_scale(self.scale, self.variant)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub guidance: GuidanceConfig,
    pub threshold: f64,
    pub split: Split,
    /// Encoders swept by `ablate` for checkpoints without a fixed encoder.
    pub kinds: Vec<GuidanceKind>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            guidance: GuidanceConfig::default(),
            threshold: 0.5,
            split: Split::Test,
            kinds: GuidanceKind::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeSection {
    pub host: String,
    pub port: u16,
    pub workers: usize,
    pub max_pixels: u64,
    pub cors_origin: Option<String>,
}

impl Default for ServeSection {
    fn default() -> Self {
        ServeSection { host: "127.0.0.1".into(), port: 8080, workers: 0, max_pixels: 4096 * 4096, cors_origin: None }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DatasetSpec,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub serve: ServeSection,
}

impl RunConfig {
    /// Reads `file` (if any), applies `overrides` in order and checks the
    /// result against the typed schema.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
        let mut root = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                text.parse::<toml::Table>().with_context(|| format!("parsing config {}", p.display()))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut root, o)?;
        }
        RunConfig::deserialize(Value::Table(root)).map_err(|e| anyhow!("invalid configuration: {e}"))
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }
}

/// Parses the right-hand side as a TOML value, falling back to a bare string
/// (so `model.variant=early` works unquoted).
fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

pub fn apply_override(root: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| anyhow!("override `{spec}` is not of the form key=value"))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("override key `{key}` has an empty component");
    }
    let (last, path) = parts.split_last().unwrap();
    let mut table = root;
    for p in path {
        let entry = table.entry(p.to_string()).or_insert_with(|| Value::Table(toml::Table::new()));
        table = entry.as_table_mut().ok_or_else(|| anyhow!("override `{key}`: `{p}` is not a section"))?;
    }
    table.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}
