//! Scoring prediction files against ground-truth sidecars, and rendering
//! comparison reports from stored per-instance records.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use kayra_backend::parse_filename;
use kayra_core::cascade::Annotation;
use kayra_core::evalstats::{build_report, evaluate_spread, render_text, EvalReport, MatchOutcome, SystemRecords};
use serde::{Deserialize, Serialize};

use crate::config::{CliConfig, Gates};
use crate::generate::{write, SIDECAR_SUFFIX};
use crate::run::{load_sidecars, ANNOTATIONS_SUFFIX};

pub const RECORDS_FILE: &str = "records.json";

/// Quality gates that were not met.
#[derive(Debug)]
pub struct GateFailure(pub Vec<String>);

impl std::fmt::Display for GateFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "quality gates failed:\n  {}", self.0.join("\n  "))
    }
}

impl std::error::Error for GateFailure {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpreadSummary {
    pub spread: String,
    pub correct: usize,
    pub merged: usize,
    pub missed: usize,
    pub class_correct: usize,
    pub rotation_correct: usize,
    pub total: usize,
}

/// Facet tags taken from a conventional file name, plus the spread itself.
fn tags_for(stem: &str) -> BTreeMap<String, String> {
    let mut tags = BTreeMap::from([("spread".to_string(), stem.to_string())]);
    if let Some(f) = parse_filename(&format!("{stem}.png")) {
        tags.insert("patient_id".into(), f.patient_id);
        tags.insert("cultivation".into(), f.cultivation);
        tags.insert("type".into(), f.kind);
    }
    tags
}

fn summarize(spread: &str, records: &[kayra_core::evalstats::InstanceRecord]) -> SpreadSummary {
    let count = |f: &dyn Fn(&kayra_core::evalstats::InstanceRecord) -> bool| records.iter().filter(|r| f(r)).count();
    SpreadSummary {
        spread: spread.to_string(),
        correct: count(&|r| matches!(r.outcome, MatchOutcome::Correct(_))),
        merged: count(&|r| matches!(r.outcome, MatchOutcome::MergedWithOther(_))),
        missed: count(&|r| r.outcome == MatchOutcome::Missed),
        class_correct: count(&|r| r.class_correct),
        rotation_correct: count(&|r| r.rotation_correct),
        total: records.len(),
    }
}

/// Gate violations of the first system in `report`.
pub fn check_gates(report: &EvalReport, gates: &Gates) -> Vec<String> {
    let mut failed = Vec::new();
    let pct = |c: u64, t: u64| if t == 0 { 100.0 } else { 100.0 * c as f64 / t as f64 };
    if let Some(seg) = report.segmentation.first() {
        let got = pct(seg.correct, seg.total);
        if got < gates.min_segmentation_pct {
            failed.push(format!("segmentation {got:.2} % < {} %", gates.min_segmentation_pct));
        }
    }
    for row in &report.per_class {
        let (c, t) = row.counts[0];
        let got = pct(c, t);
        if t > 0 && got < gates.min_class_recall_pct {
            failed.push(format!("class {} recall {got:.2} % < {} %", row.class, gates.min_class_recall_pct));
        }
    }
    failed
}

fn write_report(report: &EvalReport, out: &Path) -> anyhow::Result<String> {
    let text = render_text(report);
    write(&out.join("report.json"), &serde_json::to_vec_pretty(report)?)?;
    write(&out.join("report.txt"), text.as_bytes())?;
    Ok(text)
}

/// Matches `<stem>.annotations.json` in `pred_dir` to `<stem>.gt.json` in
/// `gt_dir`, writes per-instance records, per-spread summaries and the
/// report into `out`, then applies the configured quality gates.
pub fn evaluate(
    pred_dir: &Path,
    gt_dir: &Path,
    out: &Path,
    system: &str,
    facets: &[String],
    cfg: &CliConfig,
) -> anyhow::Result<EvalReport> {
    let sidecars = load_sidecars(gt_dir)?;
    if sidecars.is_empty() {
        bail!("no ground-truth sidecars in {}", gt_dir.display());
    }
    let mut missing = Vec::new();
    let mut pairs = Vec::new();
    for (path, gt) in sidecars {
        let name = path.file_name().unwrap_or_default().to_string_lossy().into_owned();
        let stem = name.trim_end_matches(SIDECAR_SUFFIX).to_string();
        let pred = pred_dir.join(format!("{stem}{ANNOTATIONS_SUFFIX}"));
        if pred.is_file() {
            pairs.push((stem, gt, pred));
        } else {
            missing.push(format!("missing prediction {}", pred.display()));
        }
    }
    let known: Vec<&str> = pairs.iter().map(|p| p.0.as_str()).collect();
    let mut orphans: Vec<PathBuf> = std::fs::read_dir(pred_dir)
        .with_context(|| format!("listing {}", pred_dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().unwrap_or_default().to_string_lossy();
            name.strip_suffix(ANNOTATIONS_SUFFIX).is_some_and(|s| !known.contains(&s))
        })
        .collect();
    orphans.sort();
    missing.extend(orphans.iter().map(|p| format!("no ground truth for {}", p.display())));
    if !missing.is_empty() {
        bail!("unpaired files:\n  {}", missing.join("\n  "));
    }

    let mut records = Vec::new();
    let mut spreads = Vec::new();
    for (stem, gt, pred) in &pairs {
        let bytes = std::fs::read(pred).with_context(|| format!("reading {}", pred.display()))?;
        let annotations: Vec<Annotation> =
            serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", pred.display()))?;
        let recs = evaluate_spread(gt, &annotations, &cfg.eval, &tags_for(stem))
            .with_context(|| format!("evaluating {stem}"))?;
        spreads.push(summarize(stem, &recs));
        records.extend(recs);
    }
    let systems = [SystemRecords {
        system: system.to_string(),
        records,
    }];
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write(&out.join(RECORDS_FILE), &serde_json::to_vec_pretty(&systems[0])?)?;
    write(&out.join("spreads.json"), &serde_json::to_vec_pretty(&spreads)?)?;
    let report = build_report(&systems, facets, &cfg.eval);
    print!("{}", write_report(&report, out)?);
    let failed = check_gates(&report, &cfg.gates);
    if !failed.is_empty() {
        return Err(GateFailure(failed).into());
    }
    Ok(report)
}

/// Builds a report across systems from stored records; the first file is
/// the system the others are tested against.
pub fn report(inputs: &[PathBuf], out: &Path, facets: &[String], cfg: &CliConfig) -> anyhow::Result<EvalReport> {
    let systems = inputs
        .iter()
        .map(|p| {
            let bytes = std::fs::read(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_slice::<SystemRecords>(&bytes).with_context(|| format!("parsing {}", p.display()))
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let report = build_report(&systems, facets, &cfg.eval);
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    print!("{}", write_report(&report, out)?);
    Ok(report)
}
