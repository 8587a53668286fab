//! Side-by-side comparison of final reports.

use std::fmt::Write as _;

use anyhow::{bail, Result};
use fedtier::Tier;

use crate::runner::FinalReport;

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub name: String,
    pub values: Vec<f64>,
    /// Difference from the first row, per column.
    pub deltas: Vec<f64>,
    pub best: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub columns: Vec<String>,
    pub rows: Vec<ComparisonRow>,
    /// Column means over all rows.
    pub mean: Vec<f64>,
}

fn columns(k: usize) -> Vec<String> {
    let mut c = vec![format!("recall@{k}"), format!("ndcg@{k}")];
    c.extend(Tier::ALL.map(|t| format!("{}_ndcg@{k}", t.name())));
    c
}

fn values(r: &FinalReport) -> Vec<f64> {
    let m = &r.report;
    let mut v = vec![m.overall.recall, m.overall.ndcg];
    v.extend(Tier::ALL.map(|t| m.group(t).ndcg));
    v
}

/// Build the comparison. Reports must share a dataset fingerprint and K.
pub fn compare(reports: &[FinalReport]) -> Result<Comparison> {
    if reports.len() < 2 {
        bail!("compare needs at least two reports, got {}", reports.len());
    }
    let first = &reports[0];
    for r in &reports[1..] {
        if r.dataset_fingerprint != first.dataset_fingerprint {
            bail!(
                "reports {} and {} were produced on different datasets ({} vs {})",
                first.name,
                r.name,
                first.dataset_fingerprint,
                r.dataset_fingerprint
            );
        }
        if r.report.k != first.report.k {
            bail!("reports {} and {} use different K", first.name, r.name);
        }
    }
    let cols = columns(first.report.k);
    let table: Vec<Vec<f64>> = reports.iter().map(values).collect();
    let best: Vec<f64> = (0..cols.len())
        .map(|c| table.iter().map(|v| v[c]).fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let n = table.len() as f64;
    let mean = (0..cols.len())
        .map(|c| table.iter().map(|v| v[c]).sum::<f64>() / n)
        .collect();
    let rows = reports
        .iter()
        .zip(&table)
        .map(|(r, v)| ComparisonRow {
            name: r.name.clone(),
            values: v.clone(),
            deltas: v.iter().zip(&table[0]).map(|(a, b)| a - b).collect(),
            best: v.iter().zip(&best).map(|(a, b)| a == b).collect(),
        })
        .collect();
    Ok(Comparison {
        columns: cols,
        rows,
        mean,
    })
}

impl Comparison {
    /// Markdown table; the best value of each column is bold.
    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "| run | {} | delta ndcg |", self.columns.join(" | "));
        let _ = writeln!(s, "|---|{}---|", "---|".repeat(self.columns.len()));
        let ndcg = 1;
        for row in &self.rows {
            let cells: Vec<String> = row
                .values
                .iter()
                .zip(&row.best)
                .map(|(v, &b)| {
                    if b {
                        format!("**{v:.5}**")
                    } else {
                        format!("{v:.5}")
                    }
                })
                .collect();
            let _ = writeln!(
                s,
                "| {} | {} | {:+.5} |",
                row.name,
                cells.join(" | "),
                row.deltas[ndcg]
            );
        }
        let mean: Vec<String> = self.mean.iter().map(|v| format!("{v:.5}")).collect();
        let _ = writeln!(s, "| mean | {} | |", mean.join(" | "));
        s
    }

    /// CSV with a trailing `best` column listing the columns this row wins.
    pub fn to_csv(&self) -> String {
        let mut s = format!("run,{},best\n", self.columns.join(","));
        for row in &self.rows {
            let vals: Vec<String> = row.values.iter().map(|v| v.to_string()).collect();
            let won: Vec<&str> = self
                .columns
                .iter()
                .zip(&row.best)
                .filter(|(_, &b)| b)
                .map(|(c, _)| c.as_str())
                .collect();
            let _ = writeln!(s, "{},{},{}", row.name, vals.join(","), won.join(";"));
        }
        let mean: Vec<String> = self.mean.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(s, "mean,{},", mean.join(","));
        s
    }
}
