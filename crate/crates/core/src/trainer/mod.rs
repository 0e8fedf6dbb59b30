//! Distilling solver coefficients and time steps from a teacher.
//!
//! Every trainer runs the same loop: per batch, solve from the perturbed
//! inputs `x_T′`, compare with the teacher's answer for the original `x_T`,
//! take one reverse pass, step the active parameter blocks with Adam, step
//! each `x_T′` with plain gradient descent and project it back into its ball.

mod evaluate;
mod optim;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adjoint::{backward, AdjointResult, TerminalLoss};
use crate::diffusion::NoiseSchedule;
use crate::discretization::{materialize, LearnableTimeParams, TimeGrid};
use crate::error::{Error, Result};
use crate::score::NoisePredictor;
use crate::solver::{solve, SolverCoefficients};
use crate::teacher::{Dataset, TrainRecord};
use crate::vector::{distance, dot};

pub use evaluate::{evaluate, fresh_cases, validation_cases, EvalCase, Metrics};
pub use optim::{project_ball, AdamConfig, LrDecay};
use optim::Adam;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    /// Squared L2 distance, mean over dimensions.
    #[default]
    L2,
    /// L2 divided by the teacher output's mean square.
    L2Normalized,
}

impl LossKind {
    pub fn terminal(self, x: &[f64], target: &[f64]) -> TerminalLoss {
        let d = x.len() as f64;
        let scale = match self {
            LossKind::L2 => 1.0,
            LossKind::L2Normalized => 1.0 / (dot(target, target) / d + 1e-12),
        };
        let diff: Vec<f64> = x.iter().zip(target).map(|(a, b)| a - b).collect();
        TerminalLoss {
            value: scale * dot(&diff, &diff) / d,
            cotangent: diff.iter().map(|v| scale * 2.0 * v / d).collect(),
        }
    }
}

/// Parameter blocks whose gradients are zeroed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrozenBlocks {
    pub coeffs: bool,
    pub time: bool,
}

/// Radius constant giving `r = 0.1` at six parameters.
pub fn default_radius_scale() -> f64 {
    0.1 * 6f64.powf(2.5)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// `c` in `r = c / m^{5/2}`.
    pub radius_scale: f64,
    /// Fixed radius overriding the rule.
    pub radius: Option<f64>,
    /// Epochs of the single-loop trainers.
    pub epochs: usize,
    /// Alternations K of the alternating trainer.
    pub alternations: usize,
    /// Epochs per phase of one alternation.
    pub phase_epochs: usize,
    pub batch_size: usize,
    pub coeff_optimizer: AdamConfig,
    pub time_optimizer: AdamConfig,
    /// Annealing applied to every step size, including the `x_T′` one.
    pub lr_decay: LrDecay,
    /// Step size of the `x_T′` update, in units of σ̃.
    pub x_prime_lr: f64,
    pub loss: LossKind,
    /// Keep every weight row summing to one.
    pub consistency: bool,
    pub frozen: FrozenBlocks,
    /// Shuffling seed; set by the caller, never read from config files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            radius_scale: default_radius_scale(),
            radius: None,
            epochs: 16,
            alternations: 8,
            phase_epochs: 1,
            batch_size: 32,
            coeff_optimizer: AdamConfig::default(),
            time_optimizer: AdamConfig::default(),
            lr_decay: LrDecay::Cosine,
            x_prime_lr: 0.01,
            loss: LossKind::L2,
            consistency: false,
            frozen: FrozenBlocks::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.radius_scale >= 0.0 && self.radius_scale.is_finite()) {
            return bad("radius_scale must be finite and non-negative");
        }
        if let Some(r) = self.radius {
            if !(r >= 0.0 && r.is_finite()) {
                return bad("radius must be finite and non-negative");
            }
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.phase_epochs == 0 {
            return bad("phase_epochs must be positive");
        }
        for o in [self.coeff_optimizer, self.time_optimizer] {
            if !(o.lr >= 0.0 && (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0) {
                return bad("optimizer hyperparameters out of range");
            }
        }
        if self.x_prime_lr.is_nan() || self.x_prime_lr < 0.0 {
            return bad("x_prime_lr must be non-negative");
        }
        Ok(())
    }

    /// Ball radius for `m` trainable parameters.
    pub fn radius_for(&self, m: usize) -> f64 {
        match self.radius {
            Some(r) => r,
            None if m == 0 => 0.0,
            None => self.radius_scale / (m as f64).powf(2.5),
        }
    }
}

/// One line of the training-history CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub iteration: usize,
    pub epoch: usize,
    pub phase: String,
    pub train_loss: f64,
    pub validation_loss: f64,
    pub radius: f64,
}

pub fn write_history(path: &Path, rows: &[HistoryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_history(path: &Path) -> Result<Vec<HistoryRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_err(path, e))).collect()
}

pub(crate) fn csv_err(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        }
    } else {
        Error::format(path, e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainStats {
    pub iterations: usize,
    pub radius: f64,
    /// Record-level ball checks performed after optimizer steps.
    pub projection_checks: usize,
    pub projection_violations: usize,
    /// Largest `‖x_T′ − x_T‖ − r·σ̃` observed; negative when always inside.
    pub max_ball_excess: f64,
    pub initial_validation_loss: f64,
    pub final_validation_loss: f64,
    /// Training objective on `x_T′` after the last update.
    pub final_train_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Divergence {
    pub iteration: usize,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub coeffs: SolverCoefficients,
    /// Learned time parameters; `None` for a fixed grid.
    pub params: Option<LearnableTimeParams>,
    pub grid: TimeGrid,
    pub history: Vec<HistoryRow>,
    pub stats: TrainStats,
    /// Set when training stopped on a non-finite loss; parameters are then
    /// the last ones that produced a finite batch.
    pub diverged: Option<Divergence>,
}

#[derive(Debug, Clone, Copy)]
struct Phase {
    coeffs: bool,
    time: bool,
    name: &'static str,
}

const COEFFS: Phase = Phase {
    coeffs: true,
    time: false,
    name: "coeffs",
};
const TIME: Phase = Phase {
    coeffs: false,
    time: true,
    name: "time",
};
const JOINT: Phase = Phase {
    coeffs: true,
    time: true,
    name: "joint",
};

struct Run<'a, M: ?Sized> {
    schedule: &'a NoiseSchedule,
    model: &'a M,
    config: &'a TrainConfig,
    radius: f64,
    coeffs: SolverCoefficients,
    params: Option<LearnableTimeParams>,
    grid: TimeGrid,
    adam_coeffs: Adam,
    adam_time: Adam,
    rng: ChaCha8Rng,
    epoch: usize,
    /// Updates the whole run will make, for the step-size decay.
    planned: usize,
    last_good: Option<(SolverCoefficients, Option<LearnableTimeParams>, TimeGrid)>,
    history: Vec<HistoryRow>,
    stats: TrainStats,
}

type Sample = (f64, AdjointResult);

impl<'a, M: NoisePredictor + ?Sized> Run<'a, M> {
    fn new(
        schedule: &'a NoiseSchedule,
        model: &'a M,
        config: &'a TrainConfig,
        mut coeffs: SolverCoefficients,
        params: Option<LearnableTimeParams>,
        grid: TimeGrid,
        trainable: usize,
    ) -> Result<Self> {
        config.validate()?;
        coeffs.validate()?;
        if grid.n() != coeffs.n {
            return Err(Error::Compatibility(format!(
                "grid has {} steps, coefficients expect {}",
                grid.n(),
                coeffs.n
            )));
        }
        if config.consistency {
            coeffs.project_consistency();
        }
        let time_len = params.as_ref().map_or(0, |p| p.xi.len() + p.xi_c.len());
        let radius = config.radius_for(trainable);
        Ok(Self {
            schedule,
            model,
            config,
            radius,
            adam_coeffs: Adam::new(config.coeff_optimizer, coeffs.len()),
            adam_time: Adam::new(config.time_optimizer, time_len),
            coeffs,
            params,
            grid,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            epoch: 0,
            planned: 0,
            last_good: None,
            history: Vec::new(),
            stats: TrainStats {
                radius,
                max_ball_excess: f64::NEG_INFINITY,
                ..TrainStats::default()
            },
        })
    }

    fn sample(&self, x: &[f64], target: &[f64], with_time: bool) -> Result<Sample> {
        let trace = solve(&self.coeffs, self.schedule, &self.grid, self.model, x)?;
        let loss = self.config.loss.terminal(trace.terminal(), target);
        if !loss.value.is_finite() {
            return Err(Error::Numerical {
                what: "training loss",
                detail: "non-finite".into(),
            });
        }
        let params = if with_time { self.params.as_ref() } else { None };
        let g = backward(&trace, &self.coeffs, params, self.schedule, self.model, &loss)?;
        Ok((loss.value, g))
    }

    fn loss_only(&self, x: &[f64], target: &[f64]) -> Result<f64> {
        let trace = solve(&self.coeffs, self.schedule, &self.grid, self.model, x)?;
        Ok(self.config.loss.terminal(trace.terminal(), target).value)
    }

    fn mean_loss(&self, records: &[TrainRecord], perturbed: bool) -> Result<f64> {
        if records.is_empty() {
            return Ok(f64::NAN);
        }
        let losses: Vec<f64> = records
            .par_iter()
            .map(|r| {
                let x = if perturbed { &r.x_t_prime } else { &r.x_t };
                self.loss_only(x, &r.teacher_out)
            })
            .collect::<Result<_>>()?;
        Ok(losses.iter().sum::<f64>() / losses.len() as f64)
    }

    fn check_ball(&mut self, records: &[TrainRecord]) {
        let limit = self.radius * self.schedule.sigma_tilde;
        for r in records {
            let excess = distance(&r.x_t_prime, &r.x_t) - limit;
            self.stats.projection_checks += 1;
            self.stats.max_ball_excess = self.stats.max_ball_excess.max(excess);
            if excess > 1e-12 {
                self.stats.projection_violations += 1;
            }
        }
    }

    /// Mean training loss of the epoch, or the divergence that stopped it.
    fn epoch(&mut self, dataset: &mut Dataset, phase: Phase) -> Result<Result<f64, Divergence>> {
        let update_coeffs = phase.coeffs && !self.config.frozen.coeffs;
        let update_time = phase.time && !self.config.frozen.time && self.params.is_some();
        let mut order: Vec<usize> = (0..dataset.train.len()).collect();
        order.shuffle(&mut self.rng);
        let mut total = 0.0;
        for batch in order.chunks(self.config.batch_size) {
            let recs = &dataset.train;
            let samples: Result<Vec<Sample>> = batch
                .par_iter()
                .map(|&i| self.sample(&recs[i].x_t_prime, &recs[i].teacher_out, update_time))
                .collect();
            let samples = match samples {
                Ok(s) => s,
                Err(e @ (Error::Divergence { .. } | Error::Numerical { .. })) => {
                    if let Some((c, p, g)) = self.last_good.take() {
                        self.coeffs = c;
                        self.params = p;
                        self.grid = g;
                    }
                    return Ok(Err(Divergence {
                        iteration: self.stats.iterations,
                        detail: e.to_string(),
                    }));
                }
                Err(e) => return Err(e),
            };
            self.last_good = Some((self.coeffs.clone(), self.params.clone(), self.grid.clone()));
            let b = batch.len() as f64;
            let scale = self.config.lr_decay.factor(self.stats.iterations, self.planned);
            total += samples.iter().map(|s| s.0).sum::<f64>();
            if update_coeffs {
                let mut g = vec![0.0; self.coeffs.len()];
                for (_, s) in &samples {
                    for (gi, si) in g.iter_mut().zip(&s.grad_coeffs) {
                        *gi += si / b;
                    }
                }
                self.adam_coeffs.step(&mut self.coeffs.params, &g, scale);
                if self.config.consistency {
                    self.coeffs.project_consistency();
                }
            }
            if update_time {
                let p = self.params.as_mut().expect("checked above");
                let split = p.xi.len();
                let mut g = vec![0.0; split + p.xi_c.len()];
                for (_, s) in &samples {
                    let t = &s.grad_time;
                    for (gi, si) in g.iter_mut().zip(t.xi.iter().chain(&t.xi_c)) {
                        *gi += si / b;
                    }
                }
                let mut flat: Vec<f64> = p.xi.iter().chain(&p.xi_c).copied().collect();
                self.adam_time.step(&mut flat, &g, scale);
                p.xi.copy_from_slice(&flat[..split]);
                p.xi_c.copy_from_slice(&flat[split..]);
                self.grid = materialize(p, self.schedule);
            }
            if self.radius > 0.0 && self.config.x_prime_lr > 0.0 {
                let step = scale * self.config.x_prime_lr * self.schedule.sigma_tilde;
                for (&i, (_, s)) in batch.iter().zip(&samples) {
                    let r = &mut dataset.train[i];
                    let moved: Vec<f64> = r
                        .x_t_prime
                        .iter()
                        .zip(&s.grad_x0)
                        .map(|(x, g)| x - step * g)
                        .collect();
                    r.x_t_prime = project_ball(&moved, &r.x_t, self.radius, self.schedule.sigma_tilde);
                }
            }
            self.stats.iterations += 1;
            self.check_ball(&dataset.train);
        }
        self.epoch += 1;
        Ok(Ok(total / dataset.train.len().max(1) as f64))
    }

    fn log(&mut self, phase: &str, train_loss: f64, dataset: &Dataset) -> Result<()> {
        let validation_loss = self.mean_loss(&dataset.validation, false)?;
        self.history.push(HistoryRow {
            iteration: self.stats.iterations,
            epoch: self.epoch,
            phase: phase.to_string(),
            train_loss,
            validation_loss,
            radius: self.radius,
        });
        Ok(())
    }

    /// Runs `phases` in order, stopping cleanly on a non-finite loss.
    fn run(mut self, dataset: &mut Dataset, phases: &[Phase]) -> Result<TrainOutput> {
        if dataset.dim != self.model.dim() {
            return Err(Error::Compatibility(format!(
                "dataset dimension {} does not match model dimension {}",
                dataset.dim,
                self.model.dim()
            )));
        }
        self.planned = phases.len() * dataset.train.len().div_ceil(self.config.batch_size);
        let initial = self.mean_loss(&dataset.train, true)?;
        self.log("init", initial, dataset)?;
        self.stats.initial_validation_loss = self.history[0].validation_loss;
        for phase in phases {
            match self.epoch(dataset, *phase)? {
                Ok(loss) => self.log(phase.name, loss, dataset)?,
                Err(d) => return self.finish(dataset, Some(d)),
            }
        }
        self.finish(dataset, None)
    }

    fn finish(mut self, dataset: &Dataset, diverged: Option<Divergence>) -> Result<TrainOutput> {
        let val = self.mean_loss(&dataset.validation, false);
        let train = self.mean_loss(&dataset.train, true);
        let (val, train) = if diverged.is_some() {
            (val.unwrap_or(f64::NAN), train.unwrap_or(f64::NAN))
        } else {
            (val?, train?)
        };
        self.stats.final_validation_loss = val;
        self.stats.final_train_loss = train;
        if self.stats.projection_checks == 0 {
            self.stats.max_ball_excess = 0.0;
        }
        Ok(TrainOutput {
            coeffs: self.coeffs,
            params: self.params,
            grid: self.grid,
            history: self.history,
            stats: self.stats,
            diverged,
        })
    }
}

/// Coefficients only, on a fixed grid.
pub fn train_s4s<M: NoisePredictor + ?Sized>(
    dataset: &mut Dataset,
    coeffs: &SolverCoefficients,
    grid: &TimeGrid,
    schedule: &NoiseSchedule,
    model: &M,
    config: &TrainConfig,
) -> Result<TrainOutput> {
    grid.check_against(schedule)?;
    let m = if config.frozen.coeffs { 0 } else { coeffs.len() };
    let run = Run::new(schedule, model, config, coeffs.clone(), None, grid.clone(), m)?;
    run.run(dataset, &vec![COEFFS; config.epochs])
}

fn time_count(p: &LearnableTimeParams) -> usize {
    // ξ_N and the endpoint offsets have no effect.
    p.n() + p.n().saturating_sub(1)
}

fn learnable_run<'a, M: NoisePredictor + ?Sized>(
    coeffs: &SolverCoefficients,
    params: &LearnableTimeParams,
    schedule: &'a NoiseSchedule,
    model: &'a M,
    config: &'a TrainConfig,
    coeffs_in_play: bool,
    time_in_play: bool,
) -> Result<Run<'a, M>> {
    params.validate()?;
    let m = usize::from(coeffs_in_play && !config.frozen.coeffs) * coeffs.len()
        + usize::from(time_in_play && !config.frozen.time) * time_count(params);
    let grid = materialize(params, schedule);
    Run::new(schedule, model, config, coeffs.clone(), Some(params.clone()), grid, m)
}

/// Alternates time-parameter and coefficient phases `K` times, sharing one
/// radius and one evolving `x_T′` pool.
pub fn train_s4s_alt<M: NoisePredictor + ?Sized>(
    dataset: &mut Dataset,
    coeffs: &SolverCoefficients,
    params: &LearnableTimeParams,
    schedule: &NoiseSchedule,
    model: &M,
    config: &TrainConfig,
) -> Result<TrainOutput> {
    let run = learnable_run(coeffs, params, schedule, model, config, true, true)?;
    let mut phases = Vec::new();
    for _ in 0..config.alternations {
        phases.extend(std::iter::repeat_n(TIME, config.phase_epochs));
        phases.extend(std::iter::repeat_n(COEFFS, config.phase_epochs));
    }
    run.run(dataset, &phases)
}

/// Time parameters only, coefficients frozen, for `epochs` epochs.
pub fn train_schedule_only<M: NoisePredictor + ?Sized>(
    dataset: &mut Dataset,
    coeffs: &SolverCoefficients,
    params: &LearnableTimeParams,
    schedule: &NoiseSchedule,
    model: &M,
    config: &TrainConfig,
) -> Result<TrainOutput> {
    let run = learnable_run(coeffs, params, schedule, model, config, false, true)?;
    run.run(dataset, &vec![TIME; config.epochs])
}

/// Every block updated on every batch.
pub fn train_joint<M: NoisePredictor + ?Sized>(
    dataset: &mut Dataset,
    coeffs: &SolverCoefficients,
    params: &LearnableTimeParams,
    schedule: &NoiseSchedule,
    model: &M,
    config: &TrainConfig,
) -> Result<TrainOutput> {
    let run = learnable_run(coeffs, params, schedule, model, config, true, true)?;
    run.run(dataset, &vec![JOINT; config.epochs])
}

#[cfg(test)]
mod tests;
