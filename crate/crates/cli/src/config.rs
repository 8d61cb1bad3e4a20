use std::path::Path;

use anyhow::Context;
use kayra_core::cascade::CascadeParams;
use kayra_core::evalstats::EvalConfig;
use kayra_models::{ServiceEndpoints, StageTimeouts};
use kayra_orchestrator::{layered, PipelineConfig, WorkerConfig};
use serde::{Deserialize, Serialize};

/// Thresholds `evaluate` enforces through its exit code.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Gates {
    /// Minimum share of ground-truth instances segmented Correct, in percent.
    pub min_segmentation_pct: f64,
    /// Minimum per-class classification recall, in percent.
    pub min_class_recall_pct: f64,
}

impl Default for Gates {
    fn default() -> Self {
        Self {
            min_segmentation_pct: 0.0,
            min_class_recall_pct: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeConfig {
    /// TOML file with tenants and bearer tokens, for the backend role.
    pub tokens: String,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            tokens: "tokens.toml".into(),
        }
    }
}

/// Ground-truth oracle settings for `run --backends oracle` and the oracle
/// service role. The noise seed is the top-level `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    /// Directory of ground-truth sidecars; empty means next to the images.
    pub ground_truth: String,
    pub misclass_rate: f64,
    pub iou_degrade: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            ground_truth: String::new(),
            misclass_rate: 0.0,
            iou_degrade: 0.0,
        }
    }
}

/// Everything the subcommands read from the config file and `KAYRA_*`
/// variables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub seed: u64,
    pub database: String,
    pub retries: usize,
    pub endpoints: ServiceEndpoints,
    pub timeouts: StageTimeouts,
    pub worker: WorkerConfig,
    pub cascade: CascadeParams,
    pub eval: EvalConfig,
    pub gates: Gates,
    pub serve: ServeConfig,
    pub oracle: OracleConfig,
}

impl Default for CliConfig {
    fn default() -> Self {
        let p = PipelineConfig::default();
        Self {
            seed: 0,
            database: p.database,
            retries: p.retries,
            endpoints: p.endpoints,
            timeouts: p.timeouts,
            worker: p.worker,
            cascade: p.cascade,
            eval: EvalConfig::default(),
            gates: Gates::default(),
            serve: ServeConfig::default(),
            oracle: OracleConfig::default(),
        }
    }
}

impl CliConfig {
    pub fn load(path: Option<&Path>, env: impl IntoIterator<Item = (String, String)>) -> anyhow::Result<Self> {
        let text = match path {
            Some(p) => Some(std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?),
            None => None,
        };
        let cfg: Self = layered(text.as_deref(), env)?;
        cfg.pipeline().validate()?;
        cfg.eval.validate()?;
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(cfg.oracle.misclass_rate) || !unit(cfg.oracle.iou_degrade) {
            anyhow::bail!("oracle misclass_rate and iou_degrade must lie in [0, 1]");
        }
        Ok(cfg)
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            database: self.database.clone(),
            retries: self.retries,
            endpoints: self.endpoints.clone(),
            timeouts: self.timeouts,
            worker: self.worker.clone(),
            cascade: self.cascade.clone(),
        }
    }
}
