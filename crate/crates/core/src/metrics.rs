//! Per-epoch training records and their CSV form.
//!
//! Columns: `epoch,wall_clock_seconds,train_loss,test_accuracy,total_coupling_residual,rho`.
//! The wall clock is cumulative training time and leaves out setup, data
//! loading and metric evaluation. Columns that do not apply to a method are
//! left empty.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use crate::error::Result;

pub const CSV_HEADER: &str = "epoch,wall_clock_seconds,train_loss,test_accuracy,total_coupling_residual,rho";

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub wall_clock_seconds: f64,
    pub train_loss: f64,
    pub test_accuracy: f64,
    pub total_coupling_residual: Option<f64>,
    pub rho: Option<f64>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:e}")).unwrap_or_default()
}

impl MetricsRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:e},{:.6},{},{}",
            self.epoch,
            self.wall_clock_seconds,
            self.train_loss,
            self.test_accuracy,
            opt(self.total_coupling_residual),
            opt(self.rho)
        )
    }
}

pub fn metrics_csv(records: &[MetricsRecord]) -> String {
    let mut out = String::with_capacity(64 * (records.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(out, "{}", r.csv_row());
    }
    out
}

pub fn write_metrics_csv(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(metrics_csv(records).as_bytes())?;
    Ok(())
}

/// Drops the wall-clock column, leaving the deterministic part of a metrics CSV.
pub fn strip_wall_clock(csv: &str) -> String {
    csv.lines()
        .map(|line| {
            let mut cols: Vec<&str> = line.split(',').collect();
            if cols.len() > 1 {
                cols.remove(1);
            }
            cols.join(",")
        })
        .collect::<Vec<_>>()
        .join("\n")
}
