//! Pipeline configuration: built-in defaults, overlaid by a TOML file, then
//! by `KAYRA_<SECTION>_<KEY>` environment variables.

use std::path::Path;

use kayra_core::cascade::CascadeParams;
use kayra_models::{ServiceEndpoints, StageTimeouts};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use toml::{Table, Value};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("parsing config: {0}")]
    Parse(String),
    #[error("{var}: cannot use {value:?} as {expected}")]
    BadOverride { var: String, value: String, expected: &'static str },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkerConfig {
    pub workers: usize,
    pub lease_ms: u64,
    pub poll_ms: u64,
}

impl Default for WorkerConfig {
    fn default() -> Self {
        Self {
            workers: 2,
            lease_ms: 120_000,
            poll_ms: 250,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// SQLite database shared with the backend.
    pub database: String,
    /// Extra attempts per stage call before its fallback applies.
    pub retries: usize,
    pub endpoints: ServiceEndpoints,
    pub timeouts: StageTimeouts,
    pub worker: WorkerConfig,
    pub cascade: CascadeParams,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            database: "kayra.db".into(),
            retries: 1,
            endpoints: ServiceEndpoints::all("http://127.0.0.1:8100"),
            timeouts: StageTimeouts::default(),
            worker: WorkerConfig::default(),
            cascade: CascadeParams::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.endpoints.validate().map_err(ConfigError::Invalid)?;
        self.timeouts.validate().map_err(ConfigError::Invalid)?;
        self.cascade.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.worker.workers == 0 || self.worker.lease_ms == 0 || self.worker.poll_ms == 0 {
            return Err(ConfigError::Invalid("worker count, lease and poll interval must be positive".into()));
        }
        Ok(())
    }

    /// Defaults, then `path` if given, then the process environment.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let text = match path {
            Some(p) => Some(std::fs::read_to_string(p).map_err(|source| ConfigError::Io {
                path: p.display().to_string(),
                source,
            })?),
            None => None,
        };
        let cfg: Self = layered(text.as_deref(), std::env::vars())?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Builds `T` from its defaults overlaid with `file` (TOML text) and then
/// with `KAYRA_`-prefixed variables from `env`.
pub fn layered<T>(file: Option<&str>, env: impl IntoIterator<Item = (String, String)>) -> Result<T, ConfigError>
where
    T: Default + Serialize + DeserializeOwned,
{
    let mut table = Table::try_from(T::default()).map_err(|e| ConfigError::Parse(e.to_string()))?;
    if let Some(text) = file {
        let overlay: Table = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        merge(&mut table, overlay);
    }
    apply_env(&mut table, "KAYRA", env)?;
    table.try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))
}

fn merge(base: &mut Table, overlay: Table) {
    for (k, v) in overlay {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Overrides existing keys from variables named `<PREFIX>_<KEY>` for
/// top-level keys and `<PREFIX>_<SECTION>_<KEY>` for keys of a section.
/// The replacement keeps the type of the value it replaces; variables that
/// name no key are ignored.
pub fn apply_env(
    table: &mut Table,
    prefix: &str,
    env: impl IntoIterator<Item = (String, String)>,
) -> Result<(), ConfigError> {
    let vars: Vec<(String, String)> = env.into_iter().filter(|(k, _)| k.starts_with(prefix)).collect();
    let lookup = |name: String| vars.iter().find(|(k, _)| *k == name).map(|(_, v)| v.clone());
    for (key, value) in table.iter_mut() {
        match value {
            Value::Table(section) => {
                for (sub, v) in section.iter_mut() {
                    let var = format!("{prefix}_{}_{}", key.to_uppercase(), sub.to_uppercase());
                    if let Some(raw) = lookup(var.clone()) {
                        *v = coerce(&var, v, &raw)?;
                    }
                }
            }
            other => {
                let var = format!("{prefix}_{}", key.to_uppercase());
                if let Some(raw) = lookup(var.clone()) {
                    *other = coerce(&var, other, &raw)?;
                }
            }
        }
    }
    Ok(())
}

fn coerce(var: &str, current: &Value, raw: &str) -> Result<Value, ConfigError> {
    let bad = |expected| ConfigError::BadOverride {
        var: var.to_string(),
        value: raw.to_string(),
        expected,
    };
    Ok(match current {
        Value::String(_) => Value::String(raw.to_string()),
        Value::Integer(_) => Value::Integer(raw.trim().parse().map_err(|_| bad("an integer"))?),
        Value::Float(_) => Value::Float(raw.trim().parse().map_err(|_| bad("a number"))?),
        Value::Boolean(_) => Value::Boolean(raw.trim().parse().map_err(|_| bad("true or false"))?),
        _ => return Err(bad("a scalar")),
    })
}
