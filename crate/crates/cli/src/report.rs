use std::fmt::Write as _;
use std::path::Path;

use crate::error::{CliError, Result};
use crate::metrics::{read_metrics_file, MetricsRecord};

/// Final state of one run, taken from the last row of its metrics file.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub name: String,
    pub combiner: String,
    pub params_total: usize,
    pub similarity: f64,
    pub ensemble_err: f64,
    pub best_subnet_err: f64,
}

impl RunSummary {
    pub fn from_records(name: impl Into<String>, records: &[MetricsRecord]) -> Result<Self> {
        let name = name.into();
        let last = records.last().ok_or_else(|| CliError::Report(format!("{name}: no metrics rows")))?;
        Ok(RunSummary {
            name,
            combiner: last.combiner.clone(),
            params_total: last.params_total,
            similarity: last.similarity,
            ensemble_err: 1.0 - last.ensemble_acc,
            best_subnet_err: 1.0 - last.best_subnet_acc(),
        })
    }
}

/// Run name used in reports: the metrics file's parent directory, or the file stem.
pub fn run_name(path: &Path) -> String {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    if stem == "metrics" {
        if let Some(dir) = path.parent().and_then(Path::file_name) {
            return dir.to_string_lossy().into_owned();
        }
    }
    stem
}

pub fn summarize_files(paths: &[impl AsRef<Path>]) -> Result<Vec<RunSummary>> {
    if paths.is_empty() {
        return Err(CliError::Usage("report needs at least one metrics file".into()));
    }
    paths
        .iter()
        .map(|p| RunSummary::from_records(run_name(p.as_ref()), &read_metrics_file(p.as_ref())?))
        .collect()
}

pub const REPORT_HEADER: [&str; 8] =
    ["run", "combiner", "params", "S", "ensemble_err_pct", "best_subnet_err_pct", "acc_delta_pct", "param_delta"];

/// One row per run; deltas are relative to the first run.
pub fn report_rows(runs: &[RunSummary]) -> Vec<[String; 8]> {
    let Some(base) = runs.first() else { return Vec::new() };
    runs.iter()
        .map(|r| {
            let acc_delta = (base.ensemble_err - r.ensemble_err) * 100.0;
            let param_delta = r.params_total as i64 - base.params_total as i64;
            [
                r.name.clone(),
                r.combiner.clone(),
                r.params_total.to_string(),
                format!("{:.4}", r.similarity),
                format!("{:.2}", r.ensemble_err * 100.0),
                format!("{:.2}", r.best_subnet_err * 100.0),
                format!("{acc_delta:+.2}"),
                format!("{param_delta:+}"),
            ]
        })
        .collect()
}

pub fn render_text(runs: &[RunSummary]) -> String {
    let rows = report_rows(runs);
    let mut widths: Vec<usize> = REPORT_HEADER.iter().map(|h| h.len()).collect();
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut out = String::new();
    let line = |cells: Vec<&str>, out: &mut String| {
        let parts: Vec<String> = cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, &w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect();
        let _ = writeln!(out, "{}", parts.join("  ").trim_end());
    };
    line(REPORT_HEADER.to_vec(), &mut out);
    for row in &rows {
        line(row.iter().map(String::as_str).collect(), &mut out);
    }
    out
}

pub fn render_csv(runs: &[RunSummary]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(REPORT_HEADER).map_err(|e| CliError::Report(e.to_string()))?;
    for row in report_rows(runs) {
        w.write_record(&row).map_err(|e| CliError::Report(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Report(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
