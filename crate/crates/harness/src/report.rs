//! Results table: one row per (method, scenario) over the evaluated repeats.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use fsl_core::stats::{ci95_half_width, mean};

use crate::error::{io_err, HarnessError, Result};
use crate::run::{ReportFile, REPORT_FILE};

/// Decimal places of the accuracy columns.
pub const DECIMALS: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub method: String,
    pub scenario: String,
    pub mean_accuracy: f64,
    pub ci_half_width: f64,
    pub n_repeats: usize,
}

/// Pools repeats per (method, scenario). With two or more repeats the
/// interval is over repeat means; a single repeat keeps its task-level interval.
pub fn aggregate(reports: &[ReportFile]) -> Vec<ResultRow> {
    let mut groups: BTreeMap<(&str, &str), Vec<&ReportFile>> = BTreeMap::new();
    for r in reports {
        groups.entry((&r.method, &r.scenario)).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((method, scenario), rs)| {
            let means: Vec<f64> = rs.iter().map(|r| r.mean_accuracy).collect();
            let ci = if rs.len() >= 2 {
                ci95_half_width(&means)
            } else {
                rs[0].ci_half_width
            };
            ResultRow {
                method: method.to_string(),
                scenario: scenario.to_string(),
                mean_accuracy: mean(&means),
                ci_half_width: ci,
                n_repeats: rs.len(),
            }
        })
        .collect()
}

pub fn to_csv(rows: &[ResultRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["method", "scenario", "mean_accuracy", "ci_half_width", "n_repeats"])
        .expect("in-memory write");
    for r in rows {
        w.write_record([
            r.method.clone(),
            r.scenario.clone(),
            format!("{:.*}", DECIMALS, r.mean_accuracy),
            format!("{:.*}", DECIMALS, r.ci_half_width),
            r.n_repeats.to_string(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
}

/// Reports found in `paths`: each is a run directory, a report file, or a
/// directory whose immediate subdirectories are run directories.
pub fn collect_reports(paths: &[PathBuf]) -> Result<Vec<ReportFile>> {
    let mut files = Vec::new();
    for p in paths {
        if p.is_file() {
            files.push(p.clone());
        } else if p.join(REPORT_FILE).is_file() {
            files.push(p.join(REPORT_FILE));
        } else if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)
                .map_err(io_err(p))?
                .filter_map(|e| e.ok().map(|e| e.path().join(REPORT_FILE)))
                .filter(|f| f.is_file())
                .collect();
            found.sort();
            files.extend(found);
        } else {
            return Err(HarnessError::Missing(format!("{} does not exist", p.display())));
        }
    }
    if files.is_empty() {
        return Err(HarnessError::Missing(
            "no report.json found; run `eval` before `report`".into(),
        ));
    }
    files.iter().map(|f| ReportFile::load(f)).collect()
}

/// Aggregates reports and writes the table to `out` when given.
pub fn cmd_report(paths: &[PathBuf], out: Option<&Path>) -> Result<String> {
    let table = to_csv(&aggregate(&collect_reports(paths)?));
    if let Some(path) = out {
        fs::write(path, &table).map_err(io_err(path))?;
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(method: &str, repeat: usize, mean: f64, ci: f64) -> ReportFile {
        ReportFile {
            method: method.into(),
            scenario: "target-only".into(),
            dataset: "d".into(),
            repeat,
            seed: 0,
            repeat_seed: repeat as u64,
            n_tasks: 1,
            mean_accuracy: mean,
            ci_half_width: ci,
            accuracies: vec![mean],
        }
    }

    #[test]
    fn pools_repeats_into_one_row() {
        let reports: Vec<_> = (0..10).map(|r| report("pn", r, 0.5 + 0.01 * r as f64, 0.1)).collect();
        let rows = aggregate(&reports);
        assert_eq!(rows.len(), 1);
        assert!((rows[0].mean_accuracy - 0.545).abs() < 1e-12);
        assert_eq!(rows[0].n_repeats, 10);
        let means: Vec<f64> = reports.iter().map(|r| r.mean_accuracy).collect();
        assert_eq!(rows[0].ci_half_width, ci95_half_width(&means));
    }

    #[test]
    fn single_repeat_keeps_task_interval() {
        let rows = aggregate(&[report("rn", 0, 0.7, 0.02)]);
        assert_eq!(rows[0].ci_half_width, 0.02);
    }

    #[test]
    fn csv_has_fixed_precision() {
        let rows = aggregate(&[report("pn", 0, 2.0 / 3.0, 0.0125), report("cpn", 0, 0.5, 0.0)]);
        assert_eq!(
            to_csv(&rows),
            "method,scenario,mean_accuracy,ci_half_width,n_repeats\n\
             cpn,target-only,0.5000,0.0000,1\n\
             pn,target-only,0.6667,0.0125,1\n"
        );
    }
}
