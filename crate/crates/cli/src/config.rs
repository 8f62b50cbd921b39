//! Run configuration: built-in defaults, overlaid by a TOML file, then by
//! `CRAFT_SEED`, then by command-line flags.

use std::path::Path;

use craft_core::experiment::ExperimentConfig;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::CliError;

pub const SEED_ENV: &str = "CRAFT_SEED";

/// Fully resolved configuration. Every artifact records its hash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Drives every random stream of a run: feature bank, data, codebook
    /// fitting, initialisation and batch order.
    pub seed: u64,
    pub experiment: ExperimentConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let experiment = ExperimentConfig::default();
        Self { seed: experiment.world_seed, experiment }
    }
}

impl RunConfig {
    pub fn hash(&self) -> String {
        craft_core::config_hash(self)
    }

    /// Defaults, then `file`, then the environment seed, then `seed_flag`.
    pub fn resolve(file: Option<&Path>, seed_flag: Option<u64>) -> Result<Self, CliError> {
        let mut cfg = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
                Self::from_toml(&text).map_err(|e| CliError::Format(format!("{}: {e}", path.display())))?
            }
            None => Self::default(),
        };
        if let Ok(v) = std::env::var(SEED_ENV) {
            cfg.seed = v.trim().parse().map_err(|_| CliError::Usage(format!("{SEED_ENV}={v:?} is not a seed")))?;
        }
        if let Some(s) = seed_flag {
            cfg.seed = s;
        }
        cfg.experiment.world_seed = cfg.seed;
        Ok(cfg)
    }

    /// Parse a possibly partial config; missing keys keep their defaults and
    /// unknown keys are rejected.
    pub fn from_toml(text: &str) -> Result<Self, String> {
        let user: Table = text.parse().map_err(|e: toml::de::Error| e.to_string())?;
        let mut merged = Table::try_from(Self::default()).map_err(|e| e.to_string())?;
        merge(&mut merged, &user);
        let cfg: Self = Value::Table(merged).try_into().map_err(|e: toml::de::Error| e.to_string())?;
        let resolved = Table::try_from(&cfg).map_err(|e| e.to_string())?;
        if let Some(key) = unknown_key(&user, &resolved, "") {
            return Err(format!("unknown key {key}"));
        }
        Ok(cfg)
    }
}

fn merge(base: &mut Table, over: &Table) {
    for (k, v) in over {
        match (base.get_mut(k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

fn unknown_key(user: &Table, known: &Table, prefix: &str) -> Option<String> {
    for (k, v) in user {
        let path = format!("{prefix}{k}");
        match (known.get(k), v) {
            (None, _) => return Some(path),
            (Some(Value::Table(kt)), Value::Table(ut)) => {
                if let Some(p) = unknown_key(ut, kt, &format!("{path}.")) {
                    return Some(p);
                }
            }
            _ => {}
        }
    }
    None
}
