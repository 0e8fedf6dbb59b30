use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::NoiseSchedule;
use crate::discretization::TimeGrid;
use crate::error::{Error, Result};
use crate::score::NoisePredictor;
use crate::solver::{solve, SolverCoefficients};
use crate::teacher::{draw_noise, teacher_solve, Dataset, TeacherConfig};
use crate::vector::{distance, norm};

/// A held-out problem: original noise and the teacher's answer. There is
/// deliberately no perturbed-input field here.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalCase {
    pub x_t: Vec<f64>,
    pub teacher_out: Vec<f64>,
}

/// Stream offset that keeps evaluation noise disjoint from dataset noise.
const FRESH_STREAM: u64 = 1 << 40;

/// `count` cases on noise drawn fresh from `N(0, σ̃² I)`.
pub fn fresh_cases<M: NoisePredictor + ?Sized>(
    teacher: &TeacherConfig,
    schedule: &NoiseSchedule,
    model: &M,
    count: usize,
    seed: u64,
) -> Result<Vec<EvalCase>> {
    (0..count as u64)
        .into_par_iter()
        .map(|k| {
            let x_t = draw_noise(model.dim(), schedule.sigma_tilde, seed, FRESH_STREAM + k);
            let teacher_out = teacher_solve(teacher, schedule, model, &x_t)?;
            Ok(EvalCase { x_t, teacher_out })
        })
        .collect()
}

/// Validation records as evaluation cases (original noise only).
pub fn validation_cases(dataset: &Dataset) -> Vec<EvalCase> {
    dataset
        .validation
        .iter()
        .map(|r| EvalCase {
            x_t: r.x_t.clone(),
            teacher_out: r.teacher_out.clone(),
        })
        .collect()
}

/// Terminal L2 error statistics against the teacher.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub max: f64,
    /// Mean of error / ‖teacher output‖.
    pub mean_normalized: f64,
    /// Mean squared error per dimension, the training loss on `x_T`.
    pub mse: f64,
    pub nfe: usize,
}

pub fn evaluate<M: NoisePredictor + ?Sized>(
    coeffs: &SolverCoefficients,
    grid: &TimeGrid,
    schedule: &NoiseSchedule,
    model: &M,
    cases: &[EvalCase],
) -> Result<Metrics> {
    if cases.is_empty() {
        return Err(Error::Argument("evaluation needs at least one case".into()));
    }
    let errs: Vec<(f64, f64)> = cases
        .par_iter()
        .map(|c| {
            let trace = solve(coeffs, schedule, grid, model, &c.x_t)?;
            let e = distance(trace.terminal(), &c.teacher_out);
            Ok((e, e / norm(&c.teacher_out).max(1e-300)))
        })
        .collect::<Result<_>>()?;
    let n = errs.len() as f64;
    let dim = cases[0].x_t.len() as f64;
    let mut sorted: Vec<f64> = errs.iter().map(|e| e.0).collect();
    sorted.sort_by(f64::total_cmp);
    let median = if sorted.len() % 2 == 1 {
        sorted[sorted.len() / 2]
    } else {
        0.5 * (sorted[sorted.len() / 2 - 1] + sorted[sorted.len() / 2])
    };
    Ok(Metrics {
        count: errs.len(),
        mean: errs.iter().map(|e| e.0).sum::<f64>() / n,
        median,
        max: *sorted.last().expect("non-empty"),
        mean_normalized: errs.iter().map(|e| e.1).sum::<f64>() / n,
        mse: errs.iter().map(|e| e.0 * e.0).sum::<f64>() / (n * dim),
        nfe: coeffs.nfe(),
    })
}
