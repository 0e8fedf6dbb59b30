use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::teacher::Dataset;
use crate::trainer::{evaluate, EvalCase};

use super::config::{ExperimentConfig, NamedSchedule, SolverSpec, TrainMode};
use super::results::{CellStatus, ResultRow, ResultTable};
use super::{ensure_dir, eval_cases, run_training_on};

#[derive(Debug, Clone)]
pub struct SweepReport {
    pub table: ResultTable,
    /// Cells computed in this invocation.
    pub computed: usize,
    /// Cells found on disk from an earlier invocation.
    pub skipped: usize,
    pub table_path: PathBuf,
}

struct Cell<'a> {
    schedule: &'a NamedSchedule,
    solver: &'a SolverSpec,
    nfe: usize,
    mode: TrainMode,
}

impl Cell<'_> {
    fn file_name(&self) -> String {
        let raw = format!("{}__{}__{}__nfe{}", self.schedule.name, self.solver.label(), self.mode, self.nfe);
        let safe: String = raw
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
            .collect();
        format!("{safe}.csv")
    }
}

/// Everything a schedule's cells share.
struct Shared {
    dataset: Dataset,
    cases: Vec<EvalCase>,
}

/// Runs every `schedule × solver × NFE × mode` cell of the config's sweep,
/// skipping cells already on disk, then aggregates into `sweep.csv`.
pub fn run_sweep(config: &ExperimentConfig, workers: usize) -> Result<SweepReport> {
    config.validate()?;
    let sw = &config.sweep;
    if sw.schedules.is_empty() || sw.solvers.is_empty() || sw.nfe.is_empty() || sw.modes.is_empty() {
        return Err(Error::Config("sweep needs at least one schedule, solver, NFE and mode".into()));
    }
    let cell_dir = config.output.join("cells");
    ensure_dir(&cell_dir)?;
    let mut cells = Vec::new();
    for schedule in &sw.schedules {
        for solver in &sw.solvers {
            for &nfe in &sw.nfe {
                for &mode in &sw.modes {
                    cells.push(Cell { schedule, solver, nfe, mode });
                }
            }
        }
    }
    let pending: Vec<&Cell> = cells.iter().filter(|c| !cell_dir.join(c.file_name()).exists()).collect();
    let skipped = cells.len() - pending.len();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    pool.install(|| -> Result<()> {
        let mut needed: Vec<&NamedSchedule> = Vec::new();
        for c in &pending {
            if !needed.iter().any(|s| s.name == c.schedule.name) {
                needed.push(c.schedule);
            }
        }
        let shared: HashMap<&str, Shared> = needed
            .par_iter()
            .map(|s| {
                let dataset = Dataset::generate(
                    &config.teacher,
                    &s.schedule,
                    &config.problem.model,
                    config.data.train,
                    config.data.validation,
                    config.seeds().data,
                )?;
                let cases = eval_cases(config, &s.schedule, &config.problem.model)?;
                Ok((s.name.as_str(), Shared { dataset, cases }))
            })
            .collect::<Result<_>>()?;
        pending.par_iter().try_for_each(|c| {
            let row = run_cell(config, c, &shared[c.schedule.name.as_str()]);
            write_cell(&cell_dir.join(c.file_name()), &row)
        })
    })?;

    let mut table = ResultTable::default();
    for c in &cells {
        let part = ResultTable::read_csv(&cell_dir.join(c.file_name()))?;
        table.rows.extend(part.rows);
    }
    let table_path = config.output.join("sweep.csv");
    table.write_csv(&table_path)?;
    Ok(SweepReport {
        table,
        computed: pending.len(),
        skipped,
        table_path,
    })
}

fn write_cell(path: &Path, row: &ResultRow) -> Result<()> {
    let tmp = path.with_extension("tmp");
    ResultTable { rows: vec![row.clone()] }.write_csv(&tmp)?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn run_cell(config: &ExperimentConfig, c: &Cell, shared: &Shared) -> ResultRow {
    let start = Instant::now();
    let label = c.solver.label();
    let name = c.schedule.name.as_str();
    let n = match c.solver.steps(c.nfe) {
        Ok(n) => n,
        Err(why) => {
            let mut row = ResultRow::empty(name, &label, c.mode.name(), c.nfe, CellStatus::Infeasible);
            row.detail = why;
            return row;
        }
    };
    let attempt = || -> Result<ResultRow> {
        let schedule = &c.schedule.schedule;
        let model = &config.problem.model;
        let grid = config.grid.build(schedule, n)?;
        let base = c.solver.initialize(schedule, &grid, config.seeds().preset)?;
        let bm = evaluate(&base, &grid, schedule, model, &shared.cases)?;
        let mut row = if c.mode == TrainMode::Baseline {
            ResultRow::empty(name, &label, c.mode.name(), c.nfe, CellStatus::Ok).with_metrics(&bm, Some(&bm))
        } else {
            let solver = SolverSpec { nfe: c.nfe, ..c.solver.clone() };
            let mut dataset = shared.dataset.clone();
            let out = run_training_on(config, &solver, schedule, model, c.mode, &mut dataset)?;
            let m = evaluate(&out.coeffs, &out.grid, schedule, model, &shared.cases)?;
            let status = if out.diverged.is_some() { CellStatus::Diverged } else { CellStatus::Ok };
            let mut row = ResultRow::empty(name, &label, c.mode.name(), c.nfe, status).with_metrics(&m, Some(&bm));
            if let Some(d) = out.diverged {
                row.detail = format!("diverged at iteration {}: {}", d.iteration, d.detail);
            }
            row
        };
        row.steps = Some(n);
        Ok(row)
    };
    let mut row = attempt().unwrap_or_else(|e| {
        let mut row = ResultRow::empty(name, &label, c.mode.name(), c.nfe, CellStatus::Failed);
        row.steps = Some(n);
        row.detail = e.to_string();
        row
    });
    row.wall_seconds = start.elapsed().as_secs_f64();
    row
}
