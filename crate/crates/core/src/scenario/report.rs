//! Table output: `report.csv` (one row per scenario, x/o marks for the
//! b-values), `report.json` (full results including scores) and
//! `summary.json` (mean AUC per mode).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::run::{ScenarioResult, TESTED_PAIRS};
use super::spec::{Mode, ScenarioSpec};
use crate::dwi::Protocol;
use crate::error::{Error, Result};
use crate::io::{read_json, write_json};

pub const REPORT_CSV: &str = "report.csv";
pub const REPORT_JSON: &str = "report.json";
pub const SUMMARY_JSON: &str = "summary.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub full_protocol: Protocol,
    pub rows: Vec<ScenarioResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub rows: usize,
    /// Mean AUC over rows for each mode that was run.
    pub mean_auc: BTreeMap<String, f64>,
    /// Rows whose MBDA AUC is at least the altered E2E AUC.
    pub mbda_not_worse_than_altered: usize,
    pub significant_comparisons: usize,
}

/// `x` = used by the protocol; for the test columns `o` marks a training
/// b-value the inference protocol lacks.
pub fn marks(spec: &ScenarioSpec, full: &Protocol) -> (Vec<&'static str>, Vec<&'static str>) {
    let train = full.bvalues().iter().map(|&b| if spec.training.contains(b) { "x" } else { "" }).collect();
    let test = full
        .bvalues()
        .iter()
        .map(|&b| match (spec.inference.contains(b), spec.training.contains(b)) {
            (true, _) => "x",
            (false, true) => "o",
            (false, false) => "",
        })
        .collect();
    (train, test)
}

fn pair_name(a: Mode, b: Mode) -> String {
    format!("{a}_vs_{b}")
}

pub fn csv_header(full: &Protocol) -> String {
    let mut cols = vec!["kind".to_string()];
    cols.extend(full.bvalues().iter().map(|b| format!("train_b{b}")));
    cols.extend(full.bvalues().iter().map(|b| format!("test_b{b}")));
    for m in Mode::ALL {
        cols.push(format!("auc_{m}"));
        cols.push(format!("sd_{m}"));
    }
    for (a, b) in TESTED_PAIRS {
        cols.push(format!("p_{}", pair_name(a, b)));
        cols.push(format!("holm_{}", pair_name(a, b)));
    }
    cols.join(",")
}

pub fn csv_row(r: &ScenarioResult, full: &Protocol) -> String {
    let (train, test) = marks(&r.spec, full);
    let mut cells = vec![r.spec.kind.to_string()];
    cells.extend(train.iter().chain(&test).map(|s| s.to_string()));
    for m in Mode::ALL {
        match r.mode(m) {
            Some(res) => {
                cells.push(format!("{:.4}", res.auc));
                cells.push(format!("{:.4}", res.fold_sd));
            }
            None => cells.extend([String::new(), String::new()]),
        }
    }
    for (a, b) in TESTED_PAIRS {
        match r.comparison(a, b) {
            Some(c) => {
                cells.push(format!("{:.3e}", c.delong.p_two_sided));
                cells.push(if c.significant { "*".into() } else { String::new() });
            }
            None => cells.extend([String::new(), String::new()]),
        }
    }
    cells.join(",")
}

pub fn render_csv(results: &[ScenarioResult], full: &Protocol) -> String {
    let mut out = csv_header(full);
    out.push('\n');
    for r in results {
        let _ = writeln!(out, "{}", csv_row(r, full));
    }
    out
}

pub fn summarize(results: &[ScenarioResult]) -> Summary {
    let mut mean_auc = BTreeMap::new();
    for m in Mode::ALL {
        let aucs: Vec<f64> = results.iter().filter_map(|r| r.auc(m)).collect();
        if !aucs.is_empty() {
            mean_auc.insert(m.to_string(), aucs.iter().sum::<f64>() / aucs.len() as f64);
        }
    }
    let mbda_not_worse_than_altered = results
        .iter()
        .filter(|r| matches!((r.auc(Mode::Mbda), r.auc(Mode::AlteredE2e)), (Some(a), Some(b)) if a >= b))
        .count();
    let significant_comparisons = results.iter().flat_map(|r| &r.comparisons).filter(|c| c.significant).count();
    Summary { rows: results.len(), mean_auc, mbda_not_worse_than_altered, significant_comparisons }
}

/// Write all three report files into `dir`; returns their paths.
pub fn emit_report(results: &[ScenarioResult], full: &Protocol, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv = dir.join(REPORT_CSV);
    fs::write(&csv, render_csv(results, full)).map_err(|e| Error::io(&csv, e))?;
    let json = dir.join(REPORT_JSON);
    write_json(&json, &Report { full_protocol: full.clone(), rows: results.to_vec() })?;
    let summary = dir.join(SUMMARY_JSON);
    write_json(&summary, &summarize(results))?;
    Ok(vec![csv, json, summary])
}

/// Accepts the report file or the directory containing it.
pub fn load_report(path: &Path) -> Result<Report> {
    let file = if path.is_dir() { path.join(REPORT_JSON) } else { path.to_path_buf() };
    read_json(&file)
}
