use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{fisher_exact_2x2, EvalConfig, MatchOutcome, SystemRecords};
use crate::cascade::ClassLabel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationRow {
    pub system: String,
    pub correct: u64,
    pub merged: u64,
    pub missed: u64,
    pub total: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub system: String,
    pub correct: u64,
    pub total: u64,
}

/// Per-class classification counts, one `(correct, total)` per system, and
/// the p-value of the first system against each other one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRow {
    pub class: ClassLabel,
    pub counts: Vec<(u64, u64)>,
    pub p_values: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FacetRow {
    pub key: String,
    pub value: String,
    pub system: String,
    pub segmentation_correct: u64,
    pub class_correct: u64,
    pub rotation_correct: u64,
    pub total: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub table: String,
    pub a: String,
    pub b: String,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: EvalConfig,
    pub systems: Vec<String>,
    pub segmentation: Vec<SegmentationRow>,
    pub classification: Vec<AccuracyRow>,
    pub rotation: Vec<AccuracyRow>,
    pub per_class: Vec<ClassRow>,
    pub facets: Vec<FacetRow>,
    pub comparisons: Vec<Comparison>,
    pub notes: Vec<String>,
}

/// `count / total` as a percentage with `decimals` places; "n/a" when the
/// total is zero.
pub fn format_percent(count: u64, total: u64, decimals: usize) -> String {
    if total == 0 {
        return "n/a".into();
    }
    format!("{:.*}", decimals, 100.0 * count as f64 / total as f64)
}

/// One decimal, except exact 0 and 100 which print without decimals.
pub fn format_percent_compact(count: u64, total: u64) -> String {
    match (count, total) {
        (_, 0) => "n/a".into(),
        (0, _) => "0".into(),
        (c, t) if c == t => "100".into(),
        (c, t) => format_percent(c, t, 1),
    }
}

/// Four decimals; values that would round to zero print as "<0.0001".
pub fn format_p_value(p: f64) -> String {
    if p < 0.000_05 {
        "<0.0001".into()
    } else {
        format!("{p:.4}")
    }
}

fn pair_p(a: (u64, u64), b: (u64, u64)) -> Option<f64> {
    fisher_exact_2x2(a.0, a.1 - a.0, b.0, b.1 - b.0).ok()
}

/// Aggregates per-instance records into the segmentation, classification,
/// rotation and per-class tables, facet breakdowns on `facet_keys`, and
/// pairwise Fisher tests between systems.
pub fn build_report(systems: &[SystemRecords], facet_keys: &[String], cfg: &EvalConfig) -> EvalReport {
    let names: Vec<String> = systems.iter().map(|s| s.system.clone()).collect();
    let segmentation: Vec<SegmentationRow> = systems
        .iter()
        .map(|s| {
            let mut row = SegmentationRow {
                system: s.system.clone(),
                correct: 0,
                merged: 0,
                missed: 0,
                total: s.records.len() as u64,
            };
            for r in &s.records {
                match r.outcome {
                    MatchOutcome::Correct(_) => row.correct += 1,
                    MatchOutcome::MergedWithOther(_) => row.merged += 1,
                    MatchOutcome::Missed => row.missed += 1,
                }
            }
            row
        })
        .collect();
    let accuracy = |pick: fn(&super::InstanceRecord) -> bool| -> Vec<AccuracyRow> {
        systems
            .iter()
            .map(|s| AccuracyRow {
                system: s.system.clone(),
                correct: s.records.iter().filter(|r| pick(r)).count() as u64,
                total: s.records.len() as u64,
            })
            .collect()
    };
    let classification = accuracy(|r| r.class_correct);
    let rotation = accuracy(|r| r.rotation_correct);

    let per_class = ClassLabel::all()
        .filter_map(|class| {
            let counts: Vec<(u64, u64)> = systems
                .iter()
                .map(|s| {
                    let rows = s.records.iter().filter(|r| r.gt_class == class);
                    rows.fold((0, 0), |(c, t), r| (c + r.class_correct as u64, t + 1))
                })
                .collect();
            if counts.iter().all(|c| c.1 == 0) {
                return None;
            }
            // A test on fewer than two instances per system carries no information.
            let p_values = counts
                .iter()
                .skip(1)
                .map(|&other| {
                    if counts[0].1 < 2 || other.1 < 2 {
                        None
                    } else {
                        pair_p(counts[0], other)
                    }
                })
                .collect();
            Some(ClassRow {
                class,
                counts,
                p_values,
            })
        })
        .collect();

    let mut facets = Vec::new();
    for key in facet_keys {
        for s in systems {
            let mut groups: BTreeMap<String, FacetRow> = BTreeMap::new();
            for r in &s.records {
                let value = r.tags.get(key).cloned().unwrap_or_else(|| "(untagged)".into());
                let row = groups.entry(value.clone()).or_insert_with(|| FacetRow {
                    key: key.clone(),
                    value,
                    system: s.system.clone(),
                    segmentation_correct: 0,
                    class_correct: 0,
                    rotation_correct: 0,
                    total: 0,
                });
                row.segmentation_correct += matches!(r.outcome, MatchOutcome::Correct(_)) as u64;
                row.class_correct += r.class_correct as u64;
                row.rotation_correct += r.rotation_correct as u64;
                row.total += 1;
            }
            facets.extend(groups.into_values());
        }
    }

    let mut comparisons = Vec::new();
    for i in 0..systems.len() {
        for j in i + 1..systems.len() {
            let tables = [
                ("segmentation", (segmentation[i].correct, segmentation[i].total), (segmentation[j].correct, segmentation[j].total)),
                ("classification", (classification[i].correct, classification[i].total), (classification[j].correct, classification[j].total)),
                ("rotation", (rotation[i].correct, rotation[i].total), (rotation[j].correct, rotation[j].total)),
            ];
            for (table, a, b) in tables {
                if let Some(p) = pair_p(a, b) {
                    comparisons.push(Comparison {
                        table: table.into(),
                        a: names[i].clone(),
                        b: names[j].clone(),
                        p_value: p,
                    });
                }
            }
        }
    }

    let notes = vec![
        format!(
            "segmentation: Correct needs IoU >= {} and no cross-coverage above {} of another instance",
            cfg.iou_thresh, cfg.cross_cover
        ),
        format!("rotation compared modulo 180 degrees with tolerance {} degrees", cfg.rot_tol_deg),
        "accuracy denominators are all ground-truth instances; non-Correct segmentations count as incorrect".into(),
        "Fisher exact test, two-sided: sum of probabilities of tables no more likely than the observed one".into(),
    ];

    EvalReport {
        config: cfg.clone(),
        systems: names,
        segmentation,
        classification,
        rotation,
        per_class,
        facets,
        comparisons,
        notes,
    }
}

fn table(out: &mut String, header: &[String], rows: &[Vec<String>]) {
    let widths: Vec<usize> = (0..header.len())
        .map(|c| rows.iter().map(|r| r[c].chars().count()).chain([header[c].chars().count()]).max().unwrap_or(0))
        .collect();
    let line = |cells: &[String]| {
        cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect::<Vec<_>>()
            .join("  ")
    };
    let _ = writeln!(out, "{}", line(header));
    let _ = writeln!(out, "{}", widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  "));
    for r in rows {
        let _ = writeln!(out, "{}", line(r));
    }
    out.push('\n');
}

fn comparison_lines(out: &mut String, report: &EvalReport, name: &str) {
    for c in report.comparisons.iter().filter(|c| c.table == name) {
        let _ = writeln!(out, "Fisher {} vs {}: p = {}", c.a, c.b, format_p_value(c.p_value));
    }
    out.push('\n');
}

/// Aligned-column text rendering. p-value columns appear only when there is
/// more than one system.
pub fn render_text(report: &EvalReport) -> String {
    let mut out = String::new();
    let s = |v: &str| v.to_string();

    let _ = writeln!(out, "Segmentation");
    let rows: Vec<Vec<String>> = report
        .segmentation
        .iter()
        .map(|r| {
            vec![
                r.system.clone(),
                format!("{} ({} %)", r.correct, format_percent(r.correct, r.total, 2)),
                format!("{} ({} %)", r.merged, format_percent(r.merged, r.total, 2)),
                format!("{} ({} %)", r.missed, format_percent(r.missed, r.total, 2)),
            ]
        })
        .collect();
    table(&mut out, &[s("System"), s("Correct"), s("Merged with other object"), s("Missed")], &rows);
    comparison_lines(&mut out, report, "segmentation");

    let _ = writeln!(out, "Classification");
    let rows: Vec<Vec<String>> = report
        .classification
        .iter()
        .map(|r| {
            let wrong = r.total - r.correct;
            vec![
                r.system.clone(),
                format!("{} ({} %)", r.correct, format_percent(r.correct, r.total, 1)),
                format!("{} ({} %)", wrong, format_percent(wrong, r.total, 1)),
            ]
        })
        .collect();
    table(&mut out, &[s("System"), s("Correct classification"), s("Incorrect classification")], &rows);
    comparison_lines(&mut out, report, "classification");

    let _ = writeln!(out, "Rotation");
    let rows: Vec<Vec<String>> = report
        .rotation
        .iter()
        .map(|r| {
            vec![
                r.system.clone(),
                format!("{} / {} ({} %)", r.correct, r.total, format_percent(r.correct, r.total, 2)),
            ]
        })
        .collect();
    table(&mut out, &[s("System"), s("Correctly oriented")], &rows);
    comparison_lines(&mut out, report, "rotation");

    let _ = writeln!(out, "Per-class classification");
    let mut header = vec![s("Class")];
    header.extend(report.systems.iter().map(|n| format!("{n} correct")));
    if report.systems.len() > 1 {
        header.extend(report.systems.iter().skip(1).map(|n| format!("p vs {n}")));
    }
    let rows: Vec<Vec<String>> = report
        .per_class
        .iter()
        .map(|r| {
            let mut row = vec![r.class.to_string()];
            row.extend(
                r.counts
                    .iter()
                    .map(|&(c, t)| format!("{c} / {t} ({}%)", format_percent_compact(c, t))),
            );
            if report.systems.len() > 1 {
                row.extend(r.p_values.iter().map(|p| p.map(format_p_value).unwrap_or_else(|| "---".into())));
            }
            row
        })
        .collect();
    table(&mut out, &header, &rows);

    if !report.facets.is_empty() {
        let _ = writeln!(out, "Facets");
        let rows: Vec<Vec<String>> = report
            .facets
            .iter()
            .map(|f| {
                vec![
                    format!("{}={}", f.key, f.value),
                    f.system.clone(),
                    format!("{} %", format_percent(f.segmentation_correct, f.total, 1)),
                    format!("{} %", format_percent(f.class_correct, f.total, 1)),
                    format!("{} %", format_percent(f.rotation_correct, f.total, 1)),
                    f.total.to_string(),
                ]
            })
            .collect();
        table(
            &mut out,
            &[s("Facet"), s("System"), s("Segmentation"), s("Classification"), s("Rotation"), s("n")],
            &rows,
        );
    }

    for n in &report.notes {
        let _ = writeln!(out, "* {n}");
    }
    out
}
