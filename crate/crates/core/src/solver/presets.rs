//! Coefficients of classical solvers expressed in the generalized layout.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffusion::phi::phi_values;
use crate::diffusion::NoiseSchedule;
use crate::discretization::TimeGrid;
use crate::error::{Error, Result};

use super::coeffs::{Prediction, SolverCoefficients, SolverKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Constant Adams–Bashforth weights with a lower-order ramp during warmup.
    Ipndm,
    /// Multistep DPM-Solver(++) 2M/3M.
    DpmppM,
    /// Exponential Adams–Bashforth predictor with an Adams–Moulton-type corrector.
    UniPc,
    /// Exponentially weighted Lagrange interpolation over the actual λ grid.
    AdamsBashforth,
    /// Exponential Runge–Kutta stages at equispaced λ fractions (DPM-Solver-2/3 single-step).
    DpmSolverSingle,
    GaussianRandom,
}

impl Preset {
    pub const ALL: [Preset; 6] = [
        Preset::Ipndm,
        Preset::DpmppM,
        Preset::UniPc,
        Preset::AdamsBashforth,
        Preset::DpmSolverSingle,
        Preset::GaussianRandom,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Ipndm => "ipndm",
            Preset::DpmppM => "dpmpp-m",
            Preset::UniPc => "uni-pc",
            Preset::AdamsBashforth => "adams-bashforth",
            Preset::DpmSolverSingle => "dpm-solver-single",
            Preset::GaussianRandom => "gaussian-random",
        }
    }

    /// Whether the preset keeps every increment row summing to one.
    pub fn is_consistent(self) -> bool {
        self != Preset::GaussianRandom
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Argument(format!("unknown preset `{s}`")))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PresetContext<'a> {
    pub schedule: &'a NoiseSchedule,
    pub grid: &'a TimeGrid,
    pub prediction: Prediction,
    pub tied: bool,
    pub seed: u64,
}

const AB: [&[f64]; 6] = [
    &[1.0],
    &[3.0 / 2.0, -1.0 / 2.0],
    &[23.0 / 12.0, -16.0 / 12.0, 5.0 / 12.0],
    &[55.0 / 24.0, -59.0 / 24.0, 37.0 / 24.0, -9.0 / 24.0],
    &[
        1901.0 / 720.0,
        -2774.0 / 720.0,
        2616.0 / 720.0,
        -1274.0 / 720.0,
        251.0 / 720.0,
    ],
    &[
        4277.0 / 1440.0,
        -7923.0 / 1440.0,
        9982.0 / 1440.0,
        -7298.0 / 1440.0,
        2877.0 / 1440.0,
        -475.0 / 1440.0,
    ],
];

/// Adams–Moulton weights, fresh (implicit) node first.
const AM: [&[f64]; 6] = [
    &[1.0],
    &[1.0 / 2.0, 1.0 / 2.0],
    &[5.0 / 12.0, 8.0 / 12.0, -1.0 / 12.0],
    &[9.0 / 24.0, 19.0 / 24.0, -5.0 / 24.0, 1.0 / 24.0],
    &[
        251.0 / 720.0,
        646.0 / 720.0,
        -264.0 / 720.0,
        106.0 / 720.0,
        -19.0 / 720.0,
    ],
    &[
        475.0 / 1440.0,
        1427.0 / 1440.0,
        -798.0 / 1440.0,
        482.0 / 1440.0,
        -173.0 / 1440.0,
        27.0 / 1440.0,
    ],
];

/// Monomial coefficients of the Lagrange basis polynomials on `nodes`.
pub(crate) fn lagrange_basis(nodes: &[f64]) -> Vec<Vec<f64>> {
    let m = nodes.len();
    (0..m)
        .map(|j| {
            let mut poly = vec![1.0];
            for k in (0..m).filter(|&k| k != j) {
                let denom = nodes[j] - nodes[k];
                let mut next = vec![0.0; poly.len() + 1];
                for (p, &c) in poly.iter().enumerate() {
                    next[p + 1] += c / denom;
                    next[p] -= c * nodes[k] / denom;
                }
                poly = next;
            }
            poly
        })
        .collect()
}

/// Weights `w` with `Σ_l w_l D(ν_l) = ∫_0^c e^{z(c−ν)} D(ν) dν / ∫_0^c e^{z(c−ν)} dν`
/// exactly for polynomial `D` of degree below `nodes.len()`. Nodes and `c`
/// are in units of the step `h`; `z = ±h`.
pub(crate) fn exp_weights(nodes: &[f64], z: f64, c: f64) -> Vec<f64> {
    let m = nodes.len();
    let phis = phi_values(z * c, m);
    let mut moments = Vec::with_capacity(m);
    let mut fact = 1.0;
    let mut cp = 1.0;
    for n in 0..m {
        if n > 0 {
            fact *= n as f64;
            cp *= c;
        }
        moments.push(cp * fact * phis[n] / phis[0]);
    }
    lagrange_basis(nodes)
        .iter()
        .map(|poly| poly.iter().zip(&moments).map(|(a, b)| a * b).sum())
        .collect()
}

fn sign(pred: Prediction) -> f64 {
    match pred {
        Prediction::Noise => 1.0,
        Prediction::Data => -1.0,
    }
}

fn lambdas(ctx: &PresetContext<'_>) -> Vec<f64> {
    ctx.grid.steps.iter().map(|&t| ctx.schedule.lambda(t)).collect()
}

/// Node positions `(λ_{i−j} − λ_{i−1})/h_i` for `j = 1..=m`.
fn past_nodes(lam: &[f64], i: usize, m: usize) -> Vec<f64> {
    let h = lam[i] - lam[i - 1];
    (1..=m).map(|j| (lam[i - j] - lam[i - 1]) / h).collect()
}

fn dpm_multistep_row(lam: &[f64], i: usize, m: usize, pred: Prediction) -> Vec<f64> {
    let h = lam[i] - lam[i - 1];
    match m {
        1 => vec![1.0],
        2 => {
            let r = (lam[i - 1] - lam[i - 2]) / h;
            vec![1.0 + 0.5 / r, -0.5 / r]
        }
        _ => {
            let r0 = (lam[i - 1] - lam[i - 2]) / h;
            let r1 = (lam[i - 2] - lam[i - 3]) / h;
            let d1_0 = [1.0 / r0, -1.0 / r0, 0.0];
            let diff = [1.0 / r0, -(1.0 / r0 + 1.0 / r1), 1.0 / r1];
            let rho = r0 / (r0 + r1);
            let (p1, p2_over_p1, p3_over_p1) = match pred {
                Prediction::Noise => {
                    let p1 = h.exp_m1();
                    let p2 = p1 / h - 1.0;
                    let p3 = p2 / h - 0.5;
                    (p1, p2 / p1, p3 / p1)
                }
                Prediction::Data => {
                    let p1 = (-h).exp_m1();
                    let p2 = p1 / h + 1.0;
                    let p3 = p2 / h - 0.5;
                    (p1, -p2 / p1, p3 / p1)
                }
            };
            debug_assert!(p1 != 0.0);
            (0..3)
                .map(|q| {
                    let base = if q == 0 { 1.0 } else { 0.0 };
                    let d1 = d1_0[q] + rho * diff[q];
                    let d2 = diff[q] / (r0 + r1);
                    base + p2_over_p1 * d1 + p3_over_p1 * d2
                })
                .collect()
        }
    }
}

/// Coefficients reproducing a classical solver under the generalized update.
pub fn init_preset(
    kind: SolverKind,
    order: usize,
    n: usize,
    preset: Preset,
    ctx: &PresetContext<'_>,
) -> Result<SolverCoefficients> {
    let incompatible = || {
        Error::Argument(format!(
            "preset `{preset}` is not available for {kind} solvers"
        ))
    };
    match (kind, preset) {
        (_, Preset::GaussianRandom) => {}
        (SolverKind::Lms, Preset::Ipndm | Preset::DpmppM | Preset::AdamsBashforth) => {}
        (SolverKind::Pc, Preset::Ipndm | Preset::UniPc | Preset::AdamsBashforth) => {}
        (SolverKind::Ss, Preset::DpmSolverSingle) => {}
        _ => return Err(incompatible()),
    }
    if preset == Preset::Ipndm && order > AB.len() {
        return Err(Error::Argument(format!(
            "ipndm preset supports order up to {}, got {order}",
            AB.len()
        )));
    }
    if preset == Preset::DpmppM && order > 3 {
        return Err(Error::Argument(format!(
            "dpmpp-m preset supports order up to 3, got {order}"
        )));
    }
    let mut c = SolverCoefficients::zeros(kind, order, n, ctx.prediction, ctx.tied)?;
    if preset == Preset::GaussianRandom {
        let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
        for v in &mut c.params {
            *v = StandardNormal.sample(&mut rng);
        }
        return Ok(c);
    }
    if ctx.grid.n() != n {
        return Err(Error::Compatibility(format!(
            "grid has {} steps, preset requested N = {n}",
            ctx.grid.n()
        )));
    }
    let mut full = SolverCoefficients::zeros(kind, order, n, ctx.prediction, false)?;
    let lam = lambdas(ctx);
    let z_sign = sign(ctx.prediction);
    for i in 1..=n {
        let m = order.min(i);
        let h = lam[i] - lam[i - 1];
        match kind {
            SolverKind::Lms | SolverKind::Pc => {
                let pred_row = match preset {
                    Preset::Ipndm => AB[m - 1].to_vec(),
                    Preset::DpmppM => dpm_multistep_row(&lam, i, m, ctx.prediction),
                    _ => exp_weights(&past_nodes(&lam, i, m), z_sign * h, 1.0),
                };
                for (p, v) in full.lms_row(i).into_iter().zip(pred_row) {
                    full.params[p] = v;
                }
                if kind == SolverKind::Pc {
                    let corr_row = match preset {
                        Preset::Ipndm => AM[m - 1].to_vec(),
                        _ => {
                            let mut nodes = vec![1.0];
                            nodes.extend(past_nodes(&lam, i, m - 1));
                            exp_weights(&nodes, z_sign * h, 1.0)
                        }
                    };
                    for (p, v) in full.corrector_row(i).into_iter().zip(corr_row) {
                        full.params[p] = v;
                    }
                }
            }
            SolverKind::Ss => {
                let k = order;
                let nodes: Vec<f64> = (0..k).map(|j| j as f64 / k as f64).collect();
                for j in 2..=k {
                    let cp = full.ss_c(i, j).unwrap();
                    full.params[cp] = nodes[j - 1];
                    let a = exp_weights(&nodes[..j - 1], z_sign * h, nodes[j - 1]);
                    for (l, v) in a.into_iter().enumerate() {
                        let p = full.ss_a(i, j, l + 1);
                        full.params[p] = v;
                    }
                }
                let b = exp_weights(&nodes, z_sign * h, 1.0);
                for (p, v) in full.ss_b(i).into_iter().zip(b) {
                    full.params[p] = v;
                }
            }
        }
    }
    if !ctx.tied {
        return Ok(full);
    }
    // The shared row takes the values of the last (full-width) step.
    let tie = |row_full: Vec<usize>, row_tied: Vec<usize>, c: &mut SolverCoefficients| {
        for (a, b) in row_tied.into_iter().zip(row_full) {
            c.params[a] = full.params[b];
        }
    };
    match kind {
        SolverKind::Lms => tie(full.lms_row(n), c.lms_row(n), &mut c),
        SolverKind::Pc => {
            tie(full.lms_row(n), c.lms_row(n), &mut c);
            tie(full.corrector_row(n), c.corrector_row(n), &mut c);
        }
        SolverKind::Ss => {
            let len = c.len();
            let base = full.ss_b(n)[0];
            c.params.copy_from_slice(&full.params[base..base + len]);
        }
    }
    Ok(c)
}
