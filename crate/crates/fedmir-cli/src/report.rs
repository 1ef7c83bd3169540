//! Aggregates results.csv files under a directory into `summary.csv` plus a
//! console digest: per (algorithm, axis, axis value), mean ± sample std of
//! every metric column. Only files named exactly `results.csv` are scanned,
//! so `sweep.csv` never double-counts its constituent runs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use fedmir::{Error, Result};

use crate::csvout;

/// Header columns that identify a row rather than measure it.
const KEY_COLUMNS: [&str; 6] = ["run_id", "algorithm", "axis", "axis_value", "repeat", "seed"];

fn find_results(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::input(format!("{}: {e}", dir.display())))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?;
    entries.sort();
    for path in entries {
        if path.is_dir() {
            find_results(&path, out)?;
        } else if path.file_name().and_then(|n| n.to_str()) == Some("results.csv") {
            out.push(path);
        }
    }
    Ok(())
}

struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

fn read_table(path: &Path) -> Result<Table> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
    let header: Vec<String> =
        reader.headers().map_err(|e| Error::format(format!("{}: {e}", path.display())))?
            .iter()
            .map(|s| s.to_string())
            .collect();
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
        rows.push(record.iter().map(|s| s.to_string()).collect());
    }
    Ok(Table { header, rows })
}

fn mean_and_std(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, None);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, Some(var.sqrt()))
}

#[derive(Debug)]
pub struct Summary {
    /// Metric column names in header order.
    pub metrics: Vec<String>,
    /// (algorithm, axis, axis_value) -> per-metric (mean, std) and count.
    pub groups: Vec<SummaryGroup>,
}

#[derive(Debug)]
pub struct SummaryGroup {
    pub algorithm: String,
    pub axis: String,
    pub axis_value: f64,
    pub count: usize,
    /// Aligned with `Summary::metrics`; None when no row had the value.
    pub stats: Vec<Option<(f64, Option<f64>)>>,
}

pub fn summarize(results_dir: &Path) -> Result<Summary> {
    let mut files = Vec::new();
    find_results(results_dir, &mut files)?;
    if files.is_empty() {
        return Err(Error::input(format!(
            "no results.csv files under {}",
            results_dir.display()
        )));
    }

    let first = read_table(&files[0])?;
    let mut rows = first.rows;
    for path in &files[1..] {
        let table = read_table(path)?;
        if table.header != first.header {
            return Err(Error::format(format!(
                "{}: column schema differs from {}",
                path.display(),
                files[0].display()
            )));
        }
        rows.extend(table.rows);
    }
    let header = first.header;

    let col = |name: &str| -> Result<usize> {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::format(format!("results files lack a `{name}` column")))
    };
    let algorithm_col = col("algorithm")?;
    let axis_col = col("axis")?;
    let value_col = col("axis_value")?;

    let metric_cols: Vec<usize> = (0..header.len())
        .filter(|&i| !KEY_COLUMNS.contains(&header[i].as_str()))
        .collect();
    let metrics: Vec<String> = metric_cols.iter().map(|&i| header[i].clone()).collect();

    let mut grouped: BTreeMap<(String, String, String), Vec<&Vec<String>>> = BTreeMap::new();
    for row in &rows {
        if row.len() != header.len() {
            return Err(Error::format("results row width does not match its header"));
        }
        let key =
            (row[algorithm_col].clone(), row[axis_col].clone(), row[value_col].clone());
        grouped.entry(key).or_default().push(row);
    }

    let mut groups = Vec::with_capacity(grouped.len());
    for ((algorithm, axis, value_text), members) in grouped {
        let axis_value: f64 = value_text
            .parse()
            .map_err(|_| Error::format(format!("unparseable axis_value `{value_text}`")))?;
        let stats = metric_cols
            .iter()
            .map(|&i| {
                let values: Vec<f64> =
                    members.iter().filter_map(|r| r[i].parse::<f64>().ok()).collect();
                if values.is_empty() {
                    None
                } else {
                    Some(mean_and_std(&values))
                }
            })
            .collect();
        groups.push(SummaryGroup { algorithm, axis, axis_value, count: members.len(), stats });
    }
    groups.sort_by(|a, b| {
        (&a.algorithm, &a.axis)
            .cmp(&(&b.algorithm, &b.axis))
            .then(a.axis_value.total_cmp(&b.axis_value))
    });
    Ok(Summary { metrics, groups })
}

fn summary_csv(summary: &Summary) -> Result<Vec<u8>> {
    let mut header = vec![
        "algorithm".to_string(),
        "axis".to_string(),
        "axis_value".to_string(),
        "count".to_string(),
    ];
    for m in &summary.metrics {
        header.push(format!("{m}_mean"));
        header.push(format!("{m}_std"));
    }
    let rows: Vec<Vec<String>> = summary
        .groups
        .iter()
        .map(|g| {
            let mut row = vec![
                g.algorithm.clone(),
                g.axis.clone(),
                csvout::float(g.axis_value),
                g.count.to_string(),
            ];
            for stat in &g.stats {
                match stat {
                    None => {
                        row.push(String::new());
                        row.push(String::new());
                    }
                    Some((mean, std)) => {
                        row.push(csvout::float(*mean));
                        row.push(csvout::opt_float(*std));
                    }
                }
            }
            row
        })
        .collect();
    csvout::to_csv_bytes(&header, &rows)
}

fn console_digest(summary: &Summary) -> String {
    let highlight = [
        "acc_overall",
        "acc_majority",
        "acc_minority",
        "mia_acc_majority",
        "mia_acc_minority",
        "violations",
        "dp_diff",
        "eo_diff",
        "eodds_diff",
    ];
    let mut out = String::new();
    for g in &summary.groups {
        let _ = write!(
            out,
            "{} {}={} n={}",
            g.algorithm, g.axis, g.axis_value, g.count
        );
        for name in highlight {
            if let Some(i) = summary.metrics.iter().position(|m| m == name) {
                if let Some((mean, std)) = g.stats[i] {
                    match std {
                        Some(s) => {
                            let _ = write!(out, "  {name}={mean:.4}±{s:.4}");
                        }
                        None => {
                            let _ = write!(out, "  {name}={mean:.4}");
                        }
                    }
                }
            }
        }
        out.push('\n');
    }
    out
}

/// `report`: writes `summary.csv` into the scanned directory and returns the
/// console digest.
pub fn cmd_report(results_dir: &Path) -> Result<String> {
    let summary = summarize(results_dir)?;
    csvout::write_atomic(&results_dir.join("summary.csv"), &summary_csv(&summary)?)?;
    Ok(console_digest(&summary))
}
