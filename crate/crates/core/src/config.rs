//! Run configuration: a TOML file merged with `key.path=value` overrides.
//!
//! The resolved form written by [`RunConfig::to_toml`] parses back into an
//! identical config, so a logged run can be replayed from its log.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heatmap::EncodeConfig;
use crate::metrics::Normalization;
use crate::network::train::TrainConfig;
use crate::network::NetworkConfig;
use crate::search::SearchConfig;
use crate::verify::VerifyConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub normalization: Normalization,
    /// Upper end of the CED curve.
    pub ced_max: f64,
    pub ced_steps: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            normalization: Normalization::InterOcular,
            ced_max: 0.1,
            ced_steps: 101,
        }
    }
}

/// Where training and test images come from. Without manifests the trainer
/// generates synthetic faces.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_manifest: Option<PathBuf>,
    pub test_manifest: Option<PathBuf>,
    /// First seed of the synthetic training faces.
    pub synthetic_seed: u64,
    /// First seed of the synthetic test faces.
    pub test_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_manifest: None,
            test_manifest: None,
            synthetic_seed: 0,
            test_seed: 1_000_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub encode: EncodeConfig,
    pub search: SearchConfig,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub verify: VerifyConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            encode: EncodeConfig::default(),
            search: SearchConfig::default(),
            network: NetworkConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            verify: VerifyConfig::default(),
            data: DataConfig::default(),
        }
    }
}

/// Parses the right-hand side of an override as a TOML value, falling back to
/// a bare string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Applies one `a.b.c=value` override to `table`.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override `{assignment}` is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::config(format!(
            "override key `{key}` has an empty segment"
        )));
    }
    let (last, parents) = path.split_last().expect("split yields one segment");
    let mut node = table;
    for p in parents {
        let entry = node
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    node.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    /// Parses and validates a config document.
    pub fn from_toml(text: &str) -> Result<Self> {
        let table: toml::Table = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        Self::from_table(table)
    }

    fn from_table(table: toml::Table) -> Result<Self> {
        let mut cfg: RunConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        cfg.train.search = cfg.search;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` (defaults when `None`), then applies `overrides` in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        Self::from_table(table)
    }

    pub fn validate(&self) -> Result<()> {
        // TOML integers are signed 64-bit.
        for (name, v) in [
            ("seed", self.seed),
            ("data.synthetic_seed", self.data.synthetic_seed),
            ("data.test_seed", self.data.test_seed),
        ] {
            if v > i64::MAX as u64 {
                return Err(Error::config(format!(
                    "{name} must be at most {}",
                    i64::MAX
                )));
            }
        }
        self.encode.validate()?;
        self.search.validate()?;
        self.network.validate()?;
        self.train.validate()?;
        if self.eval.ced_steps < 2 || !(self.eval.ced_max > 0.0) {
            return Err(Error::config("eval needs ced_steps >= 2 and ced_max > 0"));
        }
        if self.verify.ns_iterations == 0 {
            return Err(Error::config("verify.ns_iterations must be >= 1"));
        }
        Ok(())
    }

    /// Fully resolved form, every field spelled out.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
