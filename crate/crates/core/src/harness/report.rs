//! Report emission: per-pair CSV, JSON summary and SVG plots.

use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use super::{svg, BenchmarkReport, PairRow};
use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "id,ood,method,backbone,seed,auroc,fpr95,aupr,forwards,jacobians";

/// Which artifacts [`emit_report`] writes. The summary is always written.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Formats {
    pub csv: bool,
    pub svg: bool,
}

impl Formats {
    pub const ALL: Formats = Formats { csv: true, svg: true };

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Formats { csv: true, svg: false }),
            "svg" => Ok(Formats { csv: false, svg: true }),
            "all" => Ok(Self::ALL),
            other => Err(Error::config(format!("unknown format {other:?}; use csv, svg or all"))),
        }
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn rows_csv(rows: &[PairRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{:.6},{:.6},{:.6},{},{}\n",
            csv_field(&r.id),
            csv_field(&r.ood),
            csv_field(&r.method),
            csv_field(&r.backbone),
            r.seed,
            r.auroc,
            r.fpr95,
            r.aupr,
            r.forwards,
            r.jacobians
        ));
    }
    out
}

/// Parses a CSV written by [`rows_csv`]; metric values come back as their
/// six-decimal strings. Fields must not contain quoted commas.
pub fn parse_rows_csv(text: &str) -> Result<Vec<Vec<String>>> {
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(Error::format("unexpected CSV header"));
    }
    lines
        .map(|l| {
            let fields: Vec<String> = l.split(',').map(str::to_string).collect();
            if fields.len() != 10 {
                return Err(Error::format(format!("CSV row has {} fields: {l}", fields.len())));
            }
            Ok(fields)
        })
        .collect()
}

fn num(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else {
        Value::Null
    }
}

pub fn summary_json(report: &BenchmarkReport) -> Value {
    let aggregates: Vec<Value> = report
        .aggregates
        .iter()
        .map(|a| {
            json!({
                "method": a.method,
                "backbone": a.backbone,
                "avg_auroc": num(a.avg_auroc),
                "auroc_std": num(a.avg_auroc_std),
                "avg_worst_auroc": num(a.avg_worst_auroc),
                "avg_worst_auroc_std": num(a.avg_worst_auroc_std),
                "avg_fpr95": num(a.avg_fpr95),
                "avg_aupr": num(a.avg_aupr),
                "forwards": a.forwards,
                "jacobians": a.jacobians,
                "per_seed": a.per_seed.iter().map(|s| json!({
                    "seed": s.seed,
                    "avg_auroc": num(s.avg_auroc),
                    "avg_worst_auroc": num(s.avg_worst_auroc),
                    "avg_fpr95": num(s.avg_fpr95),
                    "avg_aupr": num(s.avg_aupr),
                })).collect::<Vec<_>>(),
            })
        })
        .collect();
    let hooks: Vec<Value> = report
        .hooks
        .iter()
        .map(|h| {
            json!({
                "seed": h.seed,
                "backbone": h.backbone,
                "method": h.method,
                "id": h.id,
                "selected": h.selection.hooks.iter().map(|k| k.to_string()).collect::<Vec<_>>(),
            })
        })
        .collect();
    json!({
        "version": report.version,
        "run": report.config.name,
        "seeds": report.seeds,
        "pairs": report
            .rows
            .iter()
            .map(|r| (&r.id, &r.ood))
            .collect::<std::collections::BTreeSet<_>>()
            .len(),
        "aupr_positive_class": "ood",
        "fpr95_convention": "smallest threshold with TPR(OOD) >= 0.95, ID scores at or above it count as false positives",
        "auroc_std_divisor": "n - 1 over seeds",
        "noise_reuse": "CFS reuses one noise draw across its levels; MSMA draws independent noise per level",
        "aggregates": aggregates,
        "hook_selections": hooks,
        "config": report.config.to_toml(),
    })
}

fn write(path: &Path, contents: &str) -> Result<PathBuf> {
    std::fs::write(path, contents).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })?;
    Ok(path.to_path_buf())
}

/// Per-pair AUROC bars, one chart per backbone, averaged over seeds.
pub fn auroc_bars(report: &BenchmarkReport, backbone: &str) -> String {
    let mut pairs: Vec<String> = Vec::new();
    for r in report.rows.iter().filter(|r| r.backbone == backbone) {
        let p = format!("{}→{}", r.id, r.ood);
        if !pairs.contains(&p) {
            pairs.push(p);
        }
    }
    let series: Vec<(String, Vec<f64>)> = report
        .aggregates
        .iter()
        .filter(|a| a.backbone == backbone)
        .map(|a| {
            let vals = pairs
                .iter()
                .map(|p| {
                    let xs: Vec<f64> = report
                        .rows
                        .iter()
                        .filter(|r| r.backbone == backbone && r.method == a.method && format!("{}→{}", r.id, r.ood) == *p)
                        .map(|r| r.auroc)
                        .collect();
                    xs.iter().sum::<f64>() / xs.len().max(1) as f64
                })
                .collect();
            (a.method.clone(), vals)
        })
        .collect();
    svg::bar_chart(&format!("AUROC per pair on {backbone}"), "AUROC", &pairs, &series)
}

/// Writes the report into `dir`, returning the written paths.
pub fn emit_report(report: &BenchmarkReport, dir: &Path, formats: Formats) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", dir.display())))
    })?;
    let mut written = Vec::new();
    if formats.csv {
        written.push(write(&dir.join("pairs.csv"), &rows_csv(&report.rows))?);
    }
    let summary = serde_json::to_string_pretty(&summary_json(report)).expect("summary serializes");
    written.push(write(&dir.join("summary.json"), &(summary + "\n"))?);
    if formats.svg {
        for bb in report.config.backbones.iter().map(|b| b.name()) {
            if report.rows.iter().any(|r| r.backbone == bb) {
                written.push(write(&dir.join(format!("auroc_{bb}.svg")), &auroc_bars(report, bb))?);
            }
        }
    }
    Ok(written)
}
