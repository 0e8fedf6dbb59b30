//! Time grids: fixed heuristics and the learnable cumulative-softmax
//! parametrization with clipped, decoupled score-input times.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GridKind {
    Uniform,
    Quadratic,
    Edm,
    LogSnr,
}

impl GridKind {
    pub const ALL: [GridKind; 4] = [
        GridKind::Uniform,
        GridKind::Quadratic,
        GridKind::Edm,
        GridKind::LogSnr,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GridKind::Uniform => "uniform",
            GridKind::Quadratic => "quadratic",
            GridKind::Edm => "edm",
            GridKind::LogSnr => "log-snr",
        }
    }
}

impl fmt::Display for GridKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GridKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GridKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Argument(format!("unknown grid kind `{s}`")))
    }
}

/// Solver time steps `t_0 = T > t_1 > … > t_N = t_min` and the times at which
/// the score is queried for each of them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub steps: Vec<f64>,
    pub score_times: Vec<f64>,
}

impl TimeGrid {
    /// Grid whose score times coincide with its steps.
    pub fn from_steps(steps: Vec<f64>) -> Result<Self> {
        let grid = Self {
            score_times: steps.clone(),
            steps,
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn n(&self) -> usize {
        self.steps.len() - 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps.len() < 2 {
            return Err(Error::Argument("a grid needs at least one step".into()));
        }
        if self.score_times.len() != self.steps.len() {
            return Err(Error::Argument("score_times and steps differ in length".into()));
        }
        if self.steps.iter().chain(&self.score_times).any(|t| !t.is_finite()) {
            return Err(Error::NonFiniteInput("TimeGrid"));
        }
        if let Some(i) = self.steps.windows(2).position(|w| w[1] >= w[0]) {
            return Err(Error::Argument(format!(
                "grid is not strictly decreasing at index {}",
                i + 1
            )));
        }
        Ok(())
    }

    /// Check the grid spans exactly `[t_min, T]` of `schedule`.
    pub fn check_against(&self, schedule: &NoiseSchedule) -> Result<()> {
        self.validate()?;
        let n = self.n();
        if self.steps[0] != schedule.t_max || self.steps[n] != schedule.t_min {
            return Err(Error::Compatibility(format!(
                "grid spans [{}, {}], schedule spans [{}, {}]",
                self.steps[n], self.steps[0], schedule.t_min, schedule.t_max
            )));
        }
        for &t in &self.score_times {
            schedule.check_time(t)?;
        }
        Ok(())
    }
}

/// Affine interpolation from `t_max` down to `t_min`.
pub fn uniform_steps(t_max: f64, t_min: f64, n: usize) -> Vec<f64> {
    let mut out: Vec<f64> = (0..=n)
        .map(|i| t_max + (i as f64 / n as f64) * (t_min - t_max))
        .collect();
    out[n] = t_min;
    out
}

/// `t_i = T + (i/N)² (t_min − T)`.
pub fn quadratic_steps(t_max: f64, t_min: f64, n: usize) -> Vec<f64> {
    let mut out: Vec<f64> = (0..=n)
        .map(|i| {
            let u = i as f64 / n as f64;
            t_max + u * u * (t_min - t_max)
        })
        .collect();
    out[n] = t_min;
    out
}

pub fn heuristic_grid(
    schedule: &NoiseSchedule,
    n: usize,
    kind: GridKind,
    rho: f64,
) -> Result<TimeGrid> {
    if n < 1 {
        return Err(Error::Argument("grid needs N >= 1".into()));
    }
    let (t_max, t_min) = (schedule.t_max, schedule.t_min);
    let mut steps = match kind {
        GridKind::Uniform => uniform_steps(t_max, t_min, n),
        GridKind::Quadratic => quadratic_steps(t_max, t_min, n),
        GridKind::Edm => {
            if !(rho > 0.0 && rho.is_finite()) {
                return Err(Error::Argument(format!("EDM grid needs rho > 0, got {rho}")));
            }
            let hi = schedule.kappa(t_max).powf(1.0 / rho);
            let lo = schedule.kappa(t_min).powf(1.0 / rho);
            (0..=n)
                .map(|i| {
                    let k = (hi + (i as f64 / n as f64) * (lo - hi)).powf(rho);
                    schedule.time_from_kappa(k)
                })
                .collect::<Result<_>>()?
        }
        GridKind::LogSnr => {
            let (lam_t, lam_min) = schedule.lambda_range();
            (0..=n)
                .map(|i| {
                    let lam = lam_t + (i as f64 / n as f64) * (lam_min - lam_t);
                    schedule.time_from_lambda(lam.clamp(lam_t, lam_min))
                })
                .collect::<Result<_>>()?
        }
    };
    steps[0] = t_max;
    steps[n] = t_min;
    TimeGrid::from_steps(steps)
}

/// Learnable time parameters `Ξ = {ξ, ξ^c}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnableTimeParams {
    pub xi: Vec<f64>,
    pub xi_c: Vec<f64>,
    pub clip_fraction: f64,
}

pub const DEFAULT_CLIP_FRACTION: f64 = 0.5;

/// Intermediate quantities of [`materialize`], reused by the VJP.
struct Materialized {
    weights: Vec<f64>,
    span: f64,
    argmin: usize,
    delta: f64,
    grid: TimeGrid,
}

impl LearnableTimeParams {
    /// ξ = 0, ξ^c = 0: the uniform grid.
    pub fn uniform(n: usize, clip_fraction: f64) -> Self {
        Self {
            xi: vec![0.0; n + 1],
            xi_c: vec![0.0; n + 1],
            clip_fraction,
        }
    }

    /// Parameters whose materialization reproduces `grid.steps`.
    pub fn from_grid(grid: &TimeGrid, clip_fraction: f64) -> Result<Self> {
        grid.validate()?;
        let n = grid.n();
        let mut xi: Vec<f64> = grid.steps.windows(2).map(|w| (w[0] - w[1]).ln()).collect();
        // Logits are shift invariant; center them to keep Adam steps comparable.
        let mean = xi.iter().sum::<f64>() / n as f64;
        xi.iter_mut().for_each(|v| *v -= mean);
        xi.push(0.0);
        Ok(Self {
            xi,
            xi_c: vec![0.0; n + 1],
            clip_fraction,
        })
    }

    pub fn n(&self) -> usize {
        self.xi.len() - 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.xi.len() < 2 || self.xi_c.len() != self.xi.len() {
            return Err(Error::Argument(
                "time parameters need matching xi and xi_c of length N+1 >= 2".into(),
            ));
        }
        if !(self.clip_fraction > 0.0 && self.clip_fraction < 1.0) {
            return Err(Error::Argument(format!(
                "clip fraction must lie in (0, 1), got {}",
                self.clip_fraction
            )));
        }
        if self.xi.iter().chain(&self.xi_c).any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput("LearnableTimeParams"));
        }
        Ok(())
    }

    fn materialize_full(&self, schedule: &NoiseSchedule) -> Materialized {
        let n = self.n();
        let logits = &self.xi[..n];
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = e.iter().sum();
        let weights: Vec<f64> = e.iter().map(|v| v / z).collect();
        let span = schedule.t_max - schedule.t_min;

        let mut steps = vec![0.0; n + 1];
        let mut acc = 0.0;
        for i in (0..n).rev() {
            acc += weights[i];
            steps[i] = schedule.t_min + span * acc;
        }
        steps[0] = schedule.t_max;
        steps[n] = schedule.t_min;

        let argmin = (0..n)
            .min_by(|&a, &b| weights[a].total_cmp(&weights[b]))
            .unwrap_or(0);
        let delta = self.clip_fraction * span * weights[argmin];
        let mut score_times = steps.clone();
        for i in 1..n {
            score_times[i] += self.xi_c[i].clamp(-delta, delta);
        }
        Materialized {
            weights,
            span,
            argmin,
            delta,
            grid: TimeGrid { steps, score_times },
        }
    }

    /// Largest allowed score-time offset, `α_clip · min_i Δt_i`.
    pub fn max_offset(&self, schedule: &NoiseSchedule) -> f64 {
        self.materialize_full(schedule).delta
    }
}

/// Cumulative softmax of ξ rescaled to `[t_min, T]`, plus clipped score-time
/// offsets at the interior indices.
pub fn materialize(params: &LearnableTimeParams, schedule: &NoiseSchedule) -> TimeGrid {
    params.materialize_full(schedule).grid
}

/// Cotangents on `(ξ, ξ^c)` given cotangents on the materialized
/// `steps` and `score_times`.
pub fn grid_gradient_vjp(
    params: &LearnableTimeParams,
    schedule: &NoiseSchedule,
    d_steps: &[f64],
    d_score_times: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = params.n();
    if d_steps.len() != n + 1 || d_score_times.len() != n + 1 {
        return Err(Error::Argument(format!(
            "grid cotangents need length {}, got {} and {}",
            n + 1,
            d_steps.len(),
            d_score_times.len()
        )));
    }
    let mat = params.materialize_full(schedule);
    let mut d_xi_c = vec![0.0; n + 1];
    let mut d_t = d_steps.to_vec();
    let mut d_delta = 0.0;
    for i in 1..n {
        let g = d_score_times[i];
        d_t[i] += g;
        let o = params.xi_c[i];
        if o > mat.delta {
            d_delta += g;
        } else if o < -mat.delta {
            d_delta -= g;
        } else if o.abs() < mat.delta {
            d_xi_c[i] = g;
        }
    }
    // Endpoints are pinned and do not depend on ξ.
    d_t[0] = 0.0;
    d_t[n] = 0.0;

    let mut d_w = vec![0.0; n];
    let mut prefix = 0.0;
    for m in 0..n {
        prefix += d_t[m];
        d_w[m] = mat.span * prefix;
    }
    d_w[mat.argmin] += params.clip_fraction * mat.span * d_delta;

    let mean: f64 = mat.weights.iter().zip(&d_w).map(|(w, g)| w * g).sum();
    let mut d_xi: Vec<f64> = mat
        .weights
        .iter()
        .zip(&d_w)
        .map(|(w, g)| w * (g - mean))
        .collect();
    d_xi.push(0.0);
    Ok((d_xi, d_xi_c))
}
