//! Configuration, persistence and experiment plumbing behind the CLI.

mod checkpoint;
mod config;
mod results;
mod selftest;
mod sweep;

use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::score::GaussianMixture;
use crate::teacher::{Dataset, TeacherKind};
use crate::trainer::{
    evaluate, fresh_cases, train_joint, train_s4s, train_s4s_alt, train_schedule_only, write_history,
    EvalCase, TrainOutput,
};

pub use checkpoint::Checkpoint;
pub use config::{
    steps_for_nfe, DataSpec, EvalSpec, ExperimentConfig, GridSpec, NamedSchedule, ProblemSpec, Seeds,
    SolverSpec, SweepSpec, TrainMode, CONFIG_VERSION,
};
pub use results::{CellStatus, ResultRow, ResultTable};
pub use selftest::{selftest, SelfTestResult};
pub use sweep::{run_sweep, SweepReport};

/// Environment variable holding the sweep worker count.
pub const WORKERS_ENV: &str = "DIFSOLVE_WORKERS";

/// Worker count from [`WORKERS_ENV`], defaulting to the available cores.
pub fn workers_from_env() -> Result<usize> {
    match std::env::var(WORKERS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(format!("{WORKERS_ENV} must be a positive integer, got `{v}`"))),
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TeacherSummary {
    pub train: usize,
    pub validation: usize,
    pub dim: usize,
    pub teacher: TeacherKind,
    pub checksum: String,
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn refuse_overwrite(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::Argument(format!(
            "{} already exists; pass --force to overwrite",
            path.display()
        )));
    }
    Ok(())
}

/// Draws the dataset for `config`, without touching the disk.
pub fn build_dataset(config: &ExperimentConfig) -> Result<Dataset> {
    config.validate()?;
    Dataset::generate(
        &config.teacher,
        &config.problem.schedule,
        &config.problem.model,
        config.data.train,
        config.data.validation,
        config.seeds().data,
    )
}

/// Generates the dataset and writes it to the config's output directory.
pub fn generate_teacher(config: &ExperimentConfig, force: bool) -> Result<TeacherSummary> {
    let path = config.dataset_path();
    refuse_overwrite(&path, force)?;
    let dataset = build_dataset(config)?;
    ensure_dir(&config.output)?;
    dataset.save(&path)?;
    Ok(TeacherSummary {
        train: dataset.train.len(),
        validation: dataset.validation.len(),
        dim: dataset.dim,
        teacher: config.teacher.kind,
        checksum: dataset.checksum(),
    })
}

/// Runs one trainer in memory.
pub fn run_training(config: &ExperimentConfig, mode: TrainMode, dataset: &mut Dataset) -> Result<TrainOutput> {
    run_training_on(config, &config.solver, &config.problem.schedule, &config.problem.model, mode, dataset)
}

pub(crate) fn run_training_on(
    config: &ExperimentConfig,
    solver: &SolverSpec,
    schedule: &NoiseSchedule,
    model: &GaussianMixture,
    mode: TrainMode,
    dataset: &mut Dataset,
) -> Result<TrainOutput> {
    let n = solver.steps(solver.nfe).map_err(Error::Config)?;
    let grid = config.grid.build(schedule, n)?;
    let coeffs = solver.initialize(schedule, &grid, config.seeds().preset)?;
    let tc = config.train_config();
    match mode {
        TrainMode::Baseline => Err(Error::Argument("baseline is evaluated, not trained".into())),
        TrainMode::S4s => train_s4s(dataset, &coeffs, &grid, schedule, model, &tc),
        TrainMode::S4sAlt => {
            let p = config.grid.learnable(&grid)?;
            train_s4s_alt(dataset, &coeffs, &p, schedule, model, &tc)
        }
        TrainMode::Joint => {
            let p = config.grid.learnable(&grid)?;
            train_joint(dataset, &coeffs, &p, schedule, model, &tc)
        }
        TrainMode::ScheduleOnly => {
            let p = config.grid.learnable(&grid)?;
            train_schedule_only(dataset, &coeffs, &p, schedule, model, &tc)
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainArtifacts {
    pub output: TrainOutput,
    pub checkpoint: Checkpoint,
}

/// Loads the dataset, trains, and writes the checkpoint and history CSV.
/// A diverged run still writes its (partial) checkpoint.
pub fn train_to_disk(config: &ExperimentConfig, mode: TrainMode, force: bool) -> Result<TrainArtifacts> {
    config.validate()?;
    let data_path = config.dataset_path();
    if !data_path.exists() {
        return Err(Error::Argument(format!(
            "dataset {} not found; run generate-teacher first",
            data_path.display()
        )));
    }
    let ck_path = config.checkpoint_path(mode);
    refuse_overwrite(&ck_path, force)?;
    let mut dataset = Dataset::load(&data_path)?;
    let output = run_training(config, mode, &mut dataset)?;
    let checkpoint = Checkpoint::new(config, mode, &output, &dataset);
    checkpoint.save(&ck_path)?;
    write_history(&config.history_path(mode), &output.history)?;
    Ok(TrainArtifacts { output, checkpoint })
}

/// Fresh evaluation cases for a schedule and model, seeded by the config.
pub(crate) fn eval_cases(
    config: &ExperimentConfig,
    schedule: &NoiseSchedule,
    model: &GaussianMixture,
) -> Result<Vec<EvalCase>> {
    fresh_cases(&config.teacher, schedule, model, config.eval.fresh, config.seeds().eval)
}

/// Baseline and trained errors on fresh noise, one pair of rows per NFE.
pub fn evaluate_checkpoint(config: &ExperimentConfig, checkpoint: &Checkpoint, force: bool) -> Result<ResultTable> {
    config.validate()?;
    checkpoint.check_config(config, force)?;
    let schedule = &config.problem.schedule;
    let model = &config.problem.model;
    if checkpoint.coeffs.kind != config.solver.kind || checkpoint.coeffs.order != config.solver.order {
        return Err(Error::Compatibility(format!(
            "checkpoint holds a {} order-{} solver, config describes {} order {}",
            checkpoint.coeffs.kind, checkpoint.coeffs.order, config.solver.kind, config.solver.order
        )));
    }
    let cases = eval_cases(config, schedule, model)?;
    let sched_name = schedule_name(schedule);
    let label = config.solver.label();
    let mut table = ResultTable::default();
    for &nfe in &config.eval.nfe {
        let n = match config.solver.steps(nfe) {
            Ok(n) => n,
            Err(why) => {
                for mode in [TrainMode::Baseline, checkpoint.mode] {
                    let mut row = ResultRow::empty(&sched_name, &label, mode.name(), nfe, CellStatus::Infeasible);
                    row.detail = why.clone();
                    table.rows.push(row);
                }
                continue;
            }
        };
        let start = Instant::now();
        let grid = config.grid.build(schedule, n)?;
        let base = config.solver.initialize(schedule, &grid, config.seeds().preset)?;
        let bm = evaluate(&base, &grid, schedule, model, &cases)?;
        let mut row = ResultRow::empty(&sched_name, &label, "baseline", nfe, CellStatus::Ok).with_metrics(&bm, Some(&bm));
        row.steps = Some(n);
        row.wall_seconds = start.elapsed().as_secs_f64();
        table.rows.push(row);
        if n == checkpoint.coeffs.n {
            let start = Instant::now();
            let m = evaluate(&checkpoint.coeffs, &checkpoint.grid, schedule, model, &cases)?;
            let status = if checkpoint.diverged.is_some() { CellStatus::Diverged } else { CellStatus::Ok };
            let mut row = ResultRow::empty(&sched_name, &label, checkpoint.mode.name(), nfe, status).with_metrics(&m, Some(&bm));
            row.steps = Some(n);
            row.wall_seconds = start.elapsed().as_secs_f64();
            row.detail = checkpoint.diverged.clone().unwrap_or_default();
            table.rows.push(row);
        }
    }
    Ok(table)
}

pub(crate) fn schedule_name(s: &NoiseSchedule) -> String {
    use crate::diffusion::ScheduleKind;
    match s.kind {
        ScheduleKind::VpLinear { .. } => "vp".into(),
        ScheduleKind::Ve => "ve".into(),
        ScheduleKind::Edm => "edm".into(),
    }
}
