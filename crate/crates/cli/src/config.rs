//! Config file loading with flat `--set key.path=value` overrides. Unknown
//! keys are rejected both in the file and in overrides, so the echoed
//! configuration fully captures a run.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use vdd_core::synth::CorpusConfig;
use vdd_core::train::TrainConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FileConfig {
    pub corpus: CorpusConfig,
    pub train: TrainConfig,
}

impl Default for FileConfig {
    fn default() -> Self {
        Self {
            corpus: CorpusConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

/// Parse the file (or defaults), apply overrides, and re-validate strictly.
pub fn load_effective_config(path: Option<&Path>, sets: &[String]) -> Result<FileConfig> {
    let base: FileConfig = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => FileConfig::default(),
    };
    let mut value = serde_json::to_value(&base)?;
    for set in sets {
        let (key, raw) = set
            .split_once('=')
            .with_context(|| format!("override `{set}` is not KEY=VALUE"))?;
        apply_override(&mut value, key, raw)?;
    }
    let effective: FileConfig =
        serde_json::from_value(value).context("effective config failed validation")?;
    effective.train.validate().map_err(anyhow::Error::from)?;
    Ok(effective)
}

fn apply_override(root: &mut serde_json::Value, key: &str, raw: &str) -> Result<()> {
    let mut cursor = &mut *root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cursor
            .as_object_mut()
            .with_context(|| format!("`{key}`: `{}` is not a section", parts[..i].join(".")))?;
        match obj.get_mut(*part) {
            Some(next) => cursor = next,
            None => bail!("unknown config key `{key}`"),
        }
    }
    let parsed: serde_json::Value = match serde_json::from_str(raw) {
        Ok(v) => v,
        Err(_) => serde_json::Value::String(raw.to_string()),
    };
    *cursor = parsed;
    Ok(())
}

/// Ablation switches from `--ablation`, mirroring the config flags.
pub fn apply_ablations(train: &mut TrainConfig, flags: &[String]) -> Result<()> {
    for flag in flags {
        match flag.as_str() {
            "" => {}
            "one-step" => train.one_step = true,
            "no-ortho" => train.no_ortho = true,
            "grl" => train.grl_enabled = true,
            "eq6-literal" => train.eq6_literal = true,
            other => bail!(
                "unknown ablation `{other}` (expected one-step, no-ortho, grl, eq6-literal)"
            ),
        }
    }
    Ok(())
}
