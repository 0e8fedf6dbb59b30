use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::trainer::{csv_err, Metrics};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CellStatus {
    Ok,
    /// The solver cannot spend exactly this many evaluations.
    Infeasible,
    Diverged,
    Failed,
}

/// One `(schedule, solver, mode, NFE)` cell. Column order is the CSV contract.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub schedule: String,
    pub solver: String,
    pub mode: String,
    pub nfe: usize,
    pub steps: Option<usize>,
    pub status: CellStatus,
    pub mean_error: Option<f64>,
    pub median_error: Option<f64>,
    pub max_error: Option<f64>,
    pub mean_error_normalized: Option<f64>,
    /// Mean error of the untrained preset on the same noise.
    pub baseline_mean_error: Option<f64>,
    /// `mean_error − baseline_mean_error`; negative means training helped.
    pub delta_vs_baseline: Option<f64>,
    pub wall_seconds: f64,
    pub detail: String,
}

impl ResultRow {
    pub fn empty(schedule: &str, solver: &str, mode: &str, nfe: usize, status: CellStatus) -> Self {
        Self {
            schedule: schedule.into(),
            solver: solver.into(),
            mode: mode.into(),
            nfe,
            steps: None,
            status,
            mean_error: None,
            median_error: None,
            max_error: None,
            mean_error_normalized: None,
            baseline_mean_error: None,
            delta_vs_baseline: None,
            wall_seconds: 0.0,
            detail: String::new(),
        }
    }

    pub fn with_metrics(mut self, m: &Metrics, baseline: Option<&Metrics>) -> Self {
        self.mean_error = Some(m.mean);
        self.median_error = Some(m.median);
        self.max_error = Some(m.max);
        self.mean_error_normalized = Some(m.mean_normalized);
        if let Some(b) = baseline {
            self.baseline_mean_error = Some(b.mean);
            self.delta_vs_baseline = Some(m.mean - b.mean);
        }
        self
    }

    pub fn key(&self) -> (String, String, String, usize) {
        (self.schedule.clone(), self.solver.clone(), self.mode.clone(), self.nfe)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
}

impl ResultTable {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        for r in &self.rows {
            w.serialize(r).map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| crate::Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
        let rows = r
            .deserialize()
            .map(|row| row.map_err(|e| csv_err(path, e)))
            .collect::<Result<_>>()?;
        Ok(Self { rows })
    }

    /// Fixed-width text rendering for terminals.
    pub fn render(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4e}"));
        let mut s = format!(
            "{:<10} {:<28} {:<14} {:>4} {:<10} {:>11} {:>11} {:>11}\n",
            "schedule", "solver", "mode", "nfe", "status", "mean", "baseline", "delta"
        );
        for r in &self.rows {
            let status = match r.status {
                CellStatus::Ok => "ok",
                CellStatus::Infeasible => "infeasible",
                CellStatus::Diverged => "diverged",
                CellStatus::Failed => "failed",
            };
            let _ = writeln!(
                s,
                "{:<10} {:<28} {:<14} {:>4} {:<10} {:>11} {:>11} {:>11}",
                r.schedule,
                r.solver,
                r.mode,
                r.nfe,
                status,
                fmt(r.mean_error),
                fmt(r.baseline_mean_error),
                fmt(r.delta_vs_baseline)
            );
        }
        s
    }
}
