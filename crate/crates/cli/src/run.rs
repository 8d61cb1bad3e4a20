//! One-shot cascade runs over image files, in-process or against services.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use kayra_backend::ingest::{decode_grayscale, encode_png};
use kayra_backend::{iscn_suggest, render_karyogram, IscnSuggestion};
use kayra_core::imaging::Raster;
use kayra_core::pipeline::{in_process, run_cascade, JobState, StageBackends, StageOutcome, StageStatus};
use kayra_core::protocol::{GroundTruthRegistry, OracleModels, OracleNoise, StubModels};
use kayra_core::synthgen::GroundTruth;
use serde::{Deserialize, Serialize};

use crate::config::CliConfig;
use crate::generate::{write, SIDECAR_SUFFIX};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum BackendKind {
    /// Classical in-process stand-ins for every model.
    Stubs,
    /// In-process ground-truth oracle fed from the sidecars.
    Oracle,
    /// The model services at the configured endpoints.
    Urls,
}

pub const ANNOTATIONS_SUFFIX: &str = ".annotations.json";

/// Contents of `<stem>.status.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunStatus {
    pub image_id: String,
    pub state: JobState,
    pub chromosomes: usize,
    pub iscn: Option<IscnSuggestion>,
    pub stage_statuses: Vec<StageStatus>,
    pub total_ms: f64,
}

/// Image files named by `inputs`; directories contribute their PNG, TIFF and
/// BMP files in name order.
pub fn collect_images(inputs: &[PathBuf]) -> anyhow::Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(p)
                .with_context(|| format!("listing {}", p.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| is_image(f))
                .collect();
            found.sort();
            out.extend(found);
        } else if p.is_file() {
            out.push(p.clone());
        } else {
            bail!("{} does not exist", p.display());
        }
    }
    if out.is_empty() {
        bail!("no images given");
    }
    Ok(out)
}

fn is_image(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "tif" | "tiff" | "bmp"))
        .unwrap_or(false)
}

pub fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

pub fn read_raster(p: &Path) -> anyhow::Result<Raster> {
    let bytes = std::fs::read(p).with_context(|| format!("reading {}", p.display()))?;
    decode_grayscale(&bytes).with_context(|| format!("decoding {}", p.display()))
}

/// Every `*.gt.json` sidecar in `dir`, in name order.
pub fn load_sidecars(dir: &Path) -> anyhow::Result<Vec<(PathBuf, GroundTruth)>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.to_string_lossy().ends_with(SIDECAR_SUFFIX))
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let bytes = std::fs::read(&p).with_context(|| format!("reading {}", p.display()))?;
            let gt = serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", p.display()))?;
            Ok((p, gt))
        })
        .collect()
}

/// A registry holding every sidecar in `dirs`.
pub fn registry_from(dirs: &BTreeSet<PathBuf>) -> anyhow::Result<Arc<GroundTruthRegistry>> {
    let registry = Arc::new(GroundTruthRegistry::new());
    for dir in dirs {
        for (_, gt) in load_sidecars(dir)? {
            registry.register(gt);
        }
    }
    Ok(registry)
}

pub fn oracle_noise(cfg: &CliConfig) -> OracleNoise {
    OracleNoise {
        iou_degrade: cfg.oracle.iou_degrade,
        misclass_rate: cfg.oracle.misclass_rate,
        seed: cfg.seed,
    }
}

fn backends(kind: BackendKind, cfg: &CliConfig, images: &[PathBuf]) -> anyhow::Result<Arc<dyn StageBackends>> {
    Ok(match kind {
        BackendKind::Stubs => Arc::new(in_process(StubModels::new(cfg.cascade.clone()))),
        BackendKind::Oracle => {
            let dirs: BTreeSet<PathBuf> = if cfg.oracle.ground_truth.is_empty() {
                images
                    .iter()
                    .map(|p| p.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from(".")))
                    .map(|d| if d.as_os_str().is_empty() { PathBuf::from(".") } else { d })
                    .collect()
            } else {
                [PathBuf::from(&cfg.oracle.ground_truth)].into()
            };
            let registry = registry_from(&dirs)?;
            if registry.is_empty() {
                bail!("the oracle found no ground-truth sidecars");
            }
            Arc::new(in_process(OracleModels::new(registry, oracle_noise(cfg))))
        }
        BackendKind::Urls => kayra_orchestrator::remote_backends(&cfg.pipeline()),
    })
}

/// Runs every image and writes its annotations, ROI chain, status and
/// karyogram into `out`. Fails when any image ends in the Failed state.
pub fn run(inputs: &[PathBuf], kind: BackendKind, out: &Path, cfg: &CliConfig) -> anyhow::Result<Vec<RunStatus>> {
    let images = collect_images(inputs)?;
    let backends = backends(kind, cfg, &images)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut statuses = Vec::new();
    let mut failures = Vec::new();
    for path in &images {
        let id = stem(path);
        let raster = read_raster(path)?;
        let result = run_cascade(&id, &raster, &cfg.cascade, backends.as_ref());
        let iscn = (!result.annotations.is_empty()).then(|| iscn_suggest(&result.annotations));
        write(&out.join(format!("{id}{ANNOTATIONS_SUFFIX}")), &serde_json::to_vec_pretty(&result.annotations)?)?;
        write(&out.join(format!("{id}.chain.json")), &serde_json::to_vec_pretty(&result.chain)?)?;
        if !result.annotations.is_empty() {
            let karyogram = render_karyogram(&result.annotations, &raster);
            write(&out.join(format!("{id}.karyogram.png")), &encode_png(&karyogram))?;
        }
        let status = RunStatus {
            image_id: id.clone(),
            state: result.state,
            chromosomes: result.annotations.len(),
            iscn,
            stage_statuses: result.statuses,
            total_ms: result.total_ms,
        };
        write(&out.join(format!("{id}.status.json")), &serde_json::to_vec_pretty(&status)?)?;
        let karyotype = status.iscn.as_ref().map(|s| s.karyotype.as_str()).unwrap_or("-");
        println!("{id}\t{}\t{} chromosomes\t{karyotype}", status.state.as_str(), status.chromosomes);
        if status.state == JobState::Failed {
            let cause = status
                .stage_statuses
                .iter()
                .find(|s| s.outcome == StageOutcome::Failed)
                .map(|s| format!("{} failed: {}", s.stage, s.detail))
                .unwrap_or_else(|| "failed".into());
            failures.push(format!("{id}: {cause}"));
        }
        statuses.push(status);
    }
    if !failures.is_empty() {
        bail!("{} of {} images failed:\n  {}", failures.len(), images.len(), failures.join("\n  "));
    }
    Ok(statuses)
}
