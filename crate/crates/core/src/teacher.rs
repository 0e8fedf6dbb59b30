//! Reference solutions of the diffusion ODE and the training datasets built
//! from them.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::NoiseSchedule;
use crate::discretization::{heuristic_grid, GridKind};
use crate::error::{Error, Result};
use crate::score::NoisePredictor;
use crate::solver::{init_preset, solve, Prediction, Preset, PresetContext, SolverKind};
use crate::vector::all_finite;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TeacherKind {
    ExactGaussian,
    AdaptiveRk,
    FineFixedStep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherConfig {
    pub kind: TeacherKind,
    pub rel_tol: f64,
    pub abs_tol: f64,
    /// Accepted-plus-rejected step budget for the adaptive integrator.
    pub max_steps: usize,
    pub fine_nfe: usize,
    pub fine_order: usize,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            kind: TeacherKind::AdaptiveRk,
            rel_tol: 1e-8,
            abs_tol: 1e-10,
            max_steps: 200_000,
            fine_nfe: 400,
            fine_order: 5,
        }
    }
}

impl TeacherConfig {
    pub fn exact() -> Self {
        Self {
            kind: TeacherKind::ExactGaussian,
            ..Self::default()
        }
    }

    pub fn adaptive(tol: f64) -> Self {
        Self {
            kind: TeacherKind::AdaptiveRk,
            rel_tol: tol,
            abs_tol: tol,
            ..Self::default()
        }
    }

    pub fn fine(nfe: usize) -> Self {
        Self {
            kind: TeacherKind::FineFixedStep,
            fine_nfe: nfe,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rel_tol > 0.0 && self.abs_tol > 0.0) {
            return Err(Error::Config("teacher tolerances must be positive".into()));
        }
        if self.max_steps == 0 {
            return Err(Error::Config("teacher max_steps must be positive".into()));
        }
        if self.fine_order == 0 || self.fine_nfe < self.fine_order {
            return Err(Error::Config(format!(
                "fine teacher needs 1 ≤ order ≤ nfe, got order {} nfe {}",
                self.fine_order, self.fine_nfe
            )));
        }
        Ok(())
    }
}

/// Terminal state `x_{t_min}` of the diffusion ODE started at `x_T`.
pub fn teacher_solve<M: NoisePredictor + ?Sized>(
    config: &TeacherConfig,
    schedule: &NoiseSchedule,
    model: &M,
    x_t: &[f64],
) -> Result<Vec<f64>> {
    config.validate()?;
    if x_t.len() != model.dim() {
        return Err(Error::Argument(format!(
            "x_T has dimension {}, model expects {}",
            x_t.len(),
            model.dim()
        )));
    }
    if !all_finite(x_t) {
        return Err(Error::NonFiniteInput("teacher_solve"));
    }
    let out = match config.kind {
        TeacherKind::ExactGaussian => model
            .exact_flow(schedule, x_t, schedule.t_max, schedule.t_min)
            .ok_or_else(|| {
                Error::Compatibility("closed-form teacher needs a single-Gaussian model".into())
            })?,
        TeacherKind::AdaptiveRk => dormand_prince(config, schedule, model, x_t)?,
        TeacherKind::FineFixedStep => fine_fixed_step(config, schedule, model, x_t)?,
    };
    if !all_finite(&out) {
        return Err(Error::Numerical {
            what: "teacher_solve",
            detail: "non-finite terminal state".into(),
        });
    }
    Ok(out)
}

fn fine_fixed_step<M: NoisePredictor + ?Sized>(
    config: &TeacherConfig,
    schedule: &NoiseSchedule,
    model: &M,
    x_t: &[f64],
) -> Result<Vec<f64>> {
    let grid = heuristic_grid(schedule, config.fine_nfe, GridKind::LogSnr, 7.0)?;
    let ctx = PresetContext {
        schedule,
        grid: &grid,
        prediction: Prediction::Data,
        tied: false,
        seed: 0,
    };
    let coeffs = init_preset(
        SolverKind::Lms,
        config.fine_order,
        config.fine_nfe,
        Preset::AdamsBashforth,
        &ctx,
    )?;
    let trace = solve(&coeffs, schedule, &grid, model, x_t)?;
    Ok(trace.terminal().to_vec())
}

// Dormand–Prince 5(4) tableau.
const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const B_LOW: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

/// Right-hand side of the diffusion ODE in λ:
/// `dx/dλ = (d log α/dλ) x − σ ε(x, t(λ))`.
fn rhs<M: NoisePredictor + ?Sized>(
    schedule: &NoiseSchedule,
    model: &M,
    lambda: f64,
    x: &[f64],
) -> Result<Vec<f64>> {
    let t = schedule.time_from_lambda(lambda)?;
    let eps = model.epsilon(schedule, x, t)?;
    let g = schedule.d_log_alpha(t) / schedule.d_lambda(t);
    let s = schedule.sigma(t);
    Ok(x.iter().zip(&eps).map(|(xi, e)| g * xi - s * e).collect())
}

fn dormand_prince<M: NoisePredictor + ?Sized>(
    config: &TeacherConfig,
    schedule: &NoiseSchedule,
    model: &M,
    x_t: &[f64],
) -> Result<Vec<f64>> {
    let (l0, l1) = schedule.lambda_range();
    let span = l1 - l0;
    let dim = x_t.len();
    let mut lam = l0;
    let mut x = x_t.to_vec();
    let mut h = 1e-2 * span;
    let mut k: Vec<Vec<f64>> = vec![vec![0.0; dim]; 7];
    k[0] = rhs(schedule, model, lam, &x)?;
    let mut stage = vec![0.0; dim];
    for _ in 0..config.max_steps {
        if lam >= l1 {
            return Ok(x);
        }
        let last = lam + h >= l1 - 1e-14 * span.max(1.0);
        if last {
            h = l1 - lam;
        }
        for s in 1..7 {
            for d in 0..dim {
                stage[d] = x[d] + h * (0..s).map(|j| A[s][j] * k[j][d]).sum::<f64>();
            }
            let ls = if s >= 5 && last { l1 } else { lam + C[s] * h };
            k[s] = rhs(schedule, model, ls.min(l1), &stage)?;
        }
        // stage now holds the fifth-order solution (row 7 of A is FSAL).
        let mut err = 0.0;
        for d in 0..dim {
            let low = x[d] + h * (0..7).map(|j| B_LOW[j] * k[j][d]).sum::<f64>();
            let scale = config.abs_tol + config.rel_tol * x[d].abs().max(stage[d].abs());
            err += ((stage[d] - low) / scale).powi(2);
        }
        let err = (err / dim as f64).sqrt();
        if !err.is_finite() {
            return Err(Error::Numerical {
                what: "adaptive teacher",
                detail: format!("non-finite error estimate at λ = {lam}"),
            });
        }
        if err <= 1.0 {
            lam = if last { l1 } else { lam + h };
            x.copy_from_slice(&stage);
            k.swap(0, 6);
        }
        let factor = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
        h *= factor;
        if h < 1e-14 * span {
            return Err(Error::Accuracy(format!("step size underflow at λ = {lam}")));
        }
    }
    if lam >= l1 {
        return Ok(x);
    }
    Err(Error::Accuracy(format!(
        "adaptive teacher exhausted {} steps at λ = {lam:.6} (target {l1:.6})",
        config.max_steps
    )))
}

/// One training example: the original noise, its perturbed copy, and the
/// teacher's answer for the original noise.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainRecord {
    pub id: u64,
    pub x_t: Vec<f64>,
    pub x_t_prime: Vec<f64>,
    pub teacher_out: Vec<f64>,
}

/// Deterministic draw from `N(0, σ̃² I)` for stream `index` of `seed`.
pub fn draw_noise(dim: usize, sigma_tilde: f64, seed: u64, index: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    (0..dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            sigma_tilde * z
        })
        .collect()
}

/// `count` records with ids `first_id..first_id + count`, solved in parallel.
pub fn generate_records<M: NoisePredictor + ?Sized>(
    config: &TeacherConfig,
    schedule: &NoiseSchedule,
    model: &M,
    first_id: u64,
    count: usize,
    seed: u64,
) -> Result<Vec<TrainRecord>> {
    (0..count as u64)
        .into_par_iter()
        .map(|k| {
            let id = first_id + k;
            let x_t = draw_noise(model.dim(), schedule.sigma_tilde, seed, id);
            let teacher_out = teacher_solve(config, schedule, model, &x_t)?;
            Ok(TrainRecord {
                id,
                x_t_prime: x_t.clone(),
                x_t,
                teacher_out,
            })
        })
        .collect()
}

pub fn generate_dataset<M: NoisePredictor + ?Sized>(
    config: &TeacherConfig,
    schedule: &NoiseSchedule,
    model: &M,
    count: usize,
    seed: u64,
) -> Result<Vec<TrainRecord>> {
    if count == 0 {
        return Err(Error::Argument("dataset count must be at least 1".into()));
    }
    generate_records(config, schedule, model, 0, count, seed)
}

/// Train and validation records sharing one noise stream.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub dim: usize,
    pub train: Vec<TrainRecord>,
    pub validation: Vec<TrainRecord>,
}

const MAGIC: &[u8; 8] = b"DSLVDATA";
const VERSION: u32 = 1;

impl Dataset {
    pub fn generate<M: NoisePredictor + ?Sized>(
        config: &TeacherConfig,
        schedule: &NoiseSchedule,
        model: &M,
        train: usize,
        validation: usize,
        seed: u64,
    ) -> Result<Self> {
        if train == 0 {
            return Err(Error::Argument("training split must hold at least one record".into()));
        }
        let mut all = generate_dataset(config, schedule, model, train + validation, seed)?;
        let validation = all.split_off(train);
        Ok(Self {
            dim: model.dim(),
            train: all,
            validation,
        })
    }

    pub fn records(&self) -> impl Iterator<Item = &TrainRecord> {
        self.train.iter().chain(&self.validation)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.train.len() + self.validation.len();
        let mut out = Vec::with_capacity(32 + n * (8 + 24 * self.dim));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.train.len() as u64).to_le_bytes());
        out.extend_from_slice(&(self.validation.len() as u64).to_le_bytes());
        for r in self.records() {
            out.extend_from_slice(&r.id.to_le_bytes());
            for v in r.x_t.iter().chain(&r.x_t_prime).chain(&r.teacher_out) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |d: String| Error::format(path, d);
        let mut r = ByteReader { rest: bytes };
        if r.take(8).ok_or_else(|| bad("truncated header".into()))? != MAGIC {
            return Err(bad("not a dataset file".into()));
        }
        let header = (|| Some((r.u32()?, r.u32()?, r.u64()?, r.u64()?)))()
            .ok_or_else(|| bad("truncated header".into()))?;
        let (version, dim, n_train, n_val) = header;
        if version != VERSION {
            return Err(bad(format!("unsupported dataset version {version}")));
        }
        let dim = dim as usize;
        if dim == 0 {
            return Err(bad("dimension is zero".into()));
        }
        let n = (n_train + n_val) as usize;
        let mut records = Vec::with_capacity(n);
        for k in 0..n {
            let rec = (|| {
                Some(TrainRecord {
                    id: r.u64()?,
                    x_t: r.f64s(dim)?,
                    x_t_prime: r.f64s(dim)?,
                    teacher_out: r.f64s(dim)?,
                })
            })()
            .ok_or_else(|| bad(format!("truncated at record {k} of {n}")))?;
            records.push(rec);
        }
        if !r.rest.is_empty() {
            return Err(bad(format!("{} trailing bytes after records", r.rest.len())));
        }
        let validation = records.split_off(n_train as usize);
        Ok(Self {
            dim,
            train: records,
            validation,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(&self.to_bytes())
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut bytes = Vec::new();
        BufReader::new(file)
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Hex SHA-256 of the serialized dataset.
    pub fn checksum(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}

struct ByteReader<'a> {
    rest: &'a [u8],
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        if self.rest.len() < n {
            return None;
        }
        let (head, tail) = self.rest.split_at(n);
        self.rest = tail;
        Some(head)
    }

    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }

    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }

    fn f64s(&mut self, n: usize) -> Option<Vec<f64>> {
        let raw = self.take(8 * n)?;
        Some(
            raw.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect(),
        )
    }
}
