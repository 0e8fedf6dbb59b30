//! Reverse-mode gradients through [`solve`](crate::solver::solve).
//!
//! The forward pass records every score evaluation and every linear update.
//! The reverse pass walks that record backwards, calling the model's VJP once
//! per forward evaluation; model internals are recomputed, never stored.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffusion::NoiseSchedule;
use crate::discretization::{
    grid_gradient_vjp, heuristic_grid, materialize, GridKind, LearnableTimeParams, TimeGrid,
};
use crate::error::{Error, Result};
use crate::score::{GaussianMixture, MixtureComponent, NoisePredictor};
use crate::solver::engine::Op;
use crate::solver::{
    init_preset, solve, Prediction, Preset, PresetContext, SolveTrace, SolverCoefficients,
    SolverKind, TimeRef,
};
use crate::vector::{all_finite, dot};

/// Value and gradient of a terminal-state loss.
#[derive(Debug, Clone, PartialEq)]
pub struct TerminalLoss {
    pub value: f64,
    pub cotangent: Vec<f64>,
}

/// Mean squared L2 distance over dimensions.
pub fn mse_loss(x: &[f64], target: &[f64]) -> TerminalLoss {
    let d = x.len() as f64;
    let diff: Vec<f64> = x.iter().zip(target).map(|(a, b)| a - b).collect();
    TerminalLoss {
        value: dot(&diff, &diff) / d,
        cotangent: diff.iter().map(|v| 2.0 * v / d).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TimeGradient {
    /// Cotangents on the materialized step times.
    pub steps: Vec<f64>,
    /// Cotangents on the materialized score times.
    pub score_times: Vec<f64>,
    /// Cotangents on ξ and ξ^c; empty when no learnable parameters were given.
    pub xi: Vec<f64>,
    pub xi_c: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdjointResult {
    pub grad_coeffs: Vec<f64>,
    pub grad_time: TimeGradient,
    pub grad_x0: Vec<f64>,
    pub loss_value: f64,
}

pub fn backward<M: NoisePredictor + ?Sized>(
    trace: &SolveTrace,
    coeffs: &SolverCoefficients,
    params: Option<&LearnableTimeParams>,
    schedule: &NoiseSchedule,
    model: &M,
    loss: &TerminalLoss,
) -> Result<AdjointResult> {
    if !trace.matches(coeffs) {
        return Err(Error::Argument(
            "trace was produced with a different coefficient layout".into(),
        ));
    }
    let n = coeffs.n;
    if let Some(p) = params {
        if p.n() != n {
            return Err(Error::Argument(format!(
                "time parameters describe {} steps, trace has {n}",
                p.n()
            )));
        }
    }
    let dim = trace.states[0].len();
    if loss.cotangent.len() != dim {
        return Err(Error::Argument("loss cotangent shape mismatch".into()));
    }

    let mut node_bar: Vec<Vec<f64>> = trace.nodes.iter().map(|v| vec![0.0; v.len()]).collect();
    let mut eval_bar: Vec<Vec<f64>> = trace
        .eps_cache
        .iter()
        .map(|e| vec![0.0; e.output.len()])
        .collect();
    let mut grad_coeffs = vec![0.0; coeffs.len()];
    let mut d_steps = vec![0.0; n + 1];
    let mut d_score = vec![0.0; n + 1];
    let mut d_stage = vec![0.0; trace.stages.len()];
    let mut add_time = |r: TimeRef, v: f64| match r {
        TimeRef::Step(i) => d_steps[i] += v,
        TimeRef::Score(i) => d_score[i] += v,
        TimeRef::Stage(j) => d_stage[j] += v,
    };
    node_bar[trace.trajectory[n]].copy_from_slice(&loss.cotangent);

    for op in trace.ops.iter().rev() {
        match *op {
            Op::Combine(ci) => {
                let c = &trace.combinations[ci];
                let y_bar = std::mem::take(&mut node_bar[c.out]);
                let base = &trace.nodes[c.base];
                for (b, y) in node_bar[c.base].iter_mut().zip(&y_bar) {
                    *b += c.tr.a * y;
                }
                let mut b_bar = 0.0;
                for &(p, e) in &c.terms {
                    let w = coeffs.params[p];
                    let d = &trace.eps_cache[e].output;
                    let yd = dot(&y_bar, d);
                    grad_coeffs[p] += c.tr.b * yd;
                    b_bar += w * yd;
                    for (eb, y) in eval_bar[e].iter_mut().zip(&y_bar) {
                        *eb += c.tr.b * w * y;
                    }
                }
                let a_bar = dot(&y_bar, base);
                add_time(c.ta, a_bar * c.tr.da[0] + b_bar * c.tr.db[0]);
                add_time(c.tb, a_bar * c.tr.da[1] + b_bar * c.tr.db[1]);
                node_bar[c.out] = y_bar;
            }
            Op::Eval(ei) => {
                let e = &trace.eps_cache[ei];
                let Some(input) = e.input else { continue };
                let d_bar = &eval_bar[ei];
                let z = &trace.nodes[input];
                let t = e.t;
                let (eps_bar, mut t_bar) = match coeffs.prediction {
                    Prediction::Noise => (d_bar.clone(), 0.0),
                    Prediction::Data => {
                        let (a, s) = (schedule.alpha(t), schedule.sigma(t));
                        let (da, ds) = (schedule.d_alpha(t), schedule.d_sigma(t));
                        for (zb, db) in node_bar[input].iter_mut().zip(d_bar) {
                            *zb += db / a;
                        }
                        let tb: f64 = d_bar
                            .iter()
                            .zip(e.eps.iter().zip(&e.output))
                            .map(|(db, (ep, xh))| db * (-ds * ep / a - xh * da / a))
                            .sum();
                        (d_bar.iter().map(|db| -s / a * db).collect(), tb)
                    }
                };
                let vjp = model.epsilon_vjp(schedule, z, t, &eps_bar)?;
                for (zb, g) in node_bar[input].iter_mut().zip(&vjp.grad_x) {
                    *zb += g;
                }
                t_bar += vjp.grad_t;
                add_time(e.time, t_bar);
            }
        }
    }

    for (j, st) in trace.stages.iter().enumerate() {
        if st.clamped || d_stage[j] == 0.0 {
            continue;
        }
        let i = st.step;
        let (ta, tb) = (trace_step_time(trace, i - 1), trace_step_time(trace, i));
        let g = d_stage[j] / schedule.d_lambda(st.t);
        d_steps[i - 1] += g * (1.0 - st.c) * schedule.d_lambda(ta);
        d_steps[i] += g * st.c * schedule.d_lambda(tb);
        grad_coeffs[st.c_param] += g * (schedule.lambda(tb) - schedule.lambda(ta));
    }

    let (xi, xi_c) = match params {
        Some(p) => grid_gradient_vjp(p, schedule, &d_steps, &d_score)?,
        None => (Vec::new(), Vec::new()),
    };
    let grad_x0 = std::mem::take(&mut node_bar[trace.trajectory[0]]);
    let result = AdjointResult {
        grad_coeffs,
        grad_time: TimeGradient {
            steps: d_steps,
            score_times: d_score,
            xi,
            xi_c,
        },
        grad_x0,
        loss_value: loss.value,
    };
    let finite = all_finite(&result.grad_coeffs)
        && all_finite(&result.grad_x0)
        && all_finite(&result.grad_time.steps)
        && all_finite(&result.grad_time.score_times)
        && all_finite(&result.grad_time.xi)
        && all_finite(&result.grad_time.xi_c);
    if !finite {
        return Err(Error::Numerical {
            what: "backward",
            detail: "non-finite gradient entry".into(),
        });
    }
    Ok(result)
}

fn trace_step_time(trace: &SolveTrace, i: usize) -> f64 {
    trace.grid.steps[i]
}

/// Forward solve and reverse pass for a mean-squared terminal loss.
pub fn loss_and_gradient<M: NoisePredictor + ?Sized>(
    coeffs: &SolverCoefficients,
    params: Option<&LearnableTimeParams>,
    grid: &TimeGrid,
    schedule: &NoiseSchedule,
    model: &M,
    x0: &[f64],
    target: &[f64],
) -> Result<AdjointResult> {
    let trace = solve(coeffs, schedule, grid, model, x0)?;
    let loss = mse_loss(trace.terminal(), target);
    backward(&trace, coeffs, params, schedule, model, &loss)
}

/// Configuration of the randomized finite-difference suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradCheckSpec {
    pub instances: usize,
    pub dim: usize,
    pub n: usize,
    pub order: usize,
    pub kinds: Vec<SolverKind>,
    pub predictions: Vec<Prediction>,
    pub seed: u64,
    pub fd_step: f64,
}

impl Default for GradCheckSpec {
    fn default() -> Self {
        Self {
            instances: 100,
            dim: 2,
            n: 4,
            order: 2,
            kinds: vec![SolverKind::Lms],
            predictions: vec![Prediction::Noise, Prediction::Data],
            seed: 0,
            fd_step: 1e-5,
        }
    }
}

/// Largest relative deviation per parameter block.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BlockDeviation {
    pub coeffs: f64,
    pub time: f64,
    pub x0: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub instances: usize,
    pub tolerance: f64,
    pub max_rel: BlockDeviation,
    pub failures: Vec<String>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// One randomized problem of the gradient suite.
pub struct GradProblem {
    pub schedule: NoiseSchedule,
    pub model: GaussianMixture,
    pub coeffs: SolverCoefficients,
    pub params: LearnableTimeParams,
    pub x0: Vec<f64>,
    pub target: Vec<f64>,
}

impl GradProblem {
    pub fn loss(&self, coeffs: &SolverCoefficients, params: &LearnableTimeParams, x0: &[f64]) -> Result<f64> {
        let grid = materialize(params, &self.schedule);
        let trace = solve(coeffs, &self.schedule, &grid, &self.model, x0)?;
        Ok(mse_loss(trace.terminal(), &self.target).value)
    }

    pub fn gradient(&self) -> Result<AdjointResult> {
        let grid = materialize(&self.params, &self.schedule);
        loss_and_gradient(
            &self.coeffs,
            Some(&self.params),
            &grid,
            &self.schedule,
            &self.model,
            &self.x0,
            &self.target,
        )
    }

    /// Central differences of the loss with respect to every block.
    pub fn finite_differences(&self, step: f64) -> Result<FdGradient> {
        let central = |f: &dyn Fn(f64) -> Result<f64>, h: f64| -> Result<f64> {
            Ok((f(h)? - f(-h)?) / (2.0 * h))
        };
        let mut gc = Vec::with_capacity(self.coeffs.len());
        for p in 0..self.coeffs.len() {
            gc.push(central(
                &|h| {
                    let mut c = self.coeffs.clone();
                    c.params[p] += h;
                    self.loss(&c, &self.params, &self.x0)
                },
                step,
            )?);
        }
        let step_c = step * 100.0 * self.params.max_offset(&self.schedule);
        let mut gxi = Vec::new();
        let mut gxc = Vec::new();
        for j in 0..self.params.xi.len() {
            gxi.push(central(
                &|h| {
                    let mut p = self.params.clone();
                    p.xi[j] += h;
                    self.loss(&self.coeffs, &p, &self.x0)
                },
                step,
            )?);
            gxc.push(central(
                &|h| {
                    let mut p = self.params.clone();
                    p.xi_c[j] += h;
                    self.loss(&self.coeffs, &p, &self.x0)
                },
                step_c,
            )?);
        }
        let mut gx = Vec::with_capacity(self.x0.len());
        for d in 0..self.x0.len() {
            gx.push(central(
                &|h| {
                    let mut x = self.x0.clone();
                    x[d] += h;
                    self.loss(&self.coeffs, &self.params, &x)
                },
                step * self.schedule.sigma_tilde,
            )?);
        }
        Ok(FdGradient { coeffs: gc, xi: gxi, xi_c: gxc, x0: gx })
    }
}

/// Finite-difference counterpart of [`AdjointResult`].
#[derive(Debug, Clone, PartialEq)]
pub struct FdGradient {
    pub coeffs: Vec<f64>,
    pub xi: Vec<f64>,
    pub xi_c: Vec<f64>,
    pub x0: Vec<f64>,
}

fn random_mixture(rng: &mut ChaCha8Rng, dim: usize) -> GaussianMixture {
    let k = 3;
    let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let mut comps: Vec<MixtureComponent> = raw
        .iter()
        .map(|w| MixtureComponent {
            weight: w / total,
            mean: (0..dim).map(|_| rng.random_range(-1.5..1.5)).collect(),
            scale_sq: rng.random_range(0.05..0.5),
        })
        .collect();
    let s: f64 = comps.iter().map(|c| c.weight).sum();
    comps[0].weight += 1.0 - s;
    GaussianMixture::new(comps).expect("random mixture is valid")
}

/// Offsets kept clear of the clip kinks so central differences stay valid.
fn offset_away_from_clip(rng: &mut ChaCha8Rng, delta: f64) -> f64 {
    let mag = if rng.random_bool(0.75) {
        rng.random_range(0.0..0.8)
    } else {
        rng.random_range(1.5..3.0)
    };
    if rng.random_bool(0.5) {
        mag * delta
    } else {
        -mag * delta
    }
}

/// Draw one instance of the suite.
pub fn random_problem(spec: &GradCheckSpec, index: usize) -> Result<GradProblem> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(index as u64 * 0x9E37_79B9));
    let kind = spec.kinds[index % spec.kinds.len()];
    let prediction = spec.predictions[(index / spec.kinds.len()) % spec.predictions.len()];
    let schedule = if index % 4 == 3 {
        NoiseSchedule::edm()
    } else {
        NoiseSchedule::vp_linear()
    };
    let model = random_mixture(&mut rng, spec.dim);
    let base = heuristic_grid(&schedule, spec.n, GridKind::LogSnr, 7.0)?;
    let mut params = LearnableTimeParams::from_grid(&base, 0.5)?;
    for v in params.xi.iter_mut().take(spec.n) {
        *v += rng.random_range(-0.3..0.3);
    }
    let delta = params.max_offset(&schedule);
    for i in 1..spec.n {
        params.xi_c[i] = offset_away_from_clip(&mut rng, delta);
    }
    let grid = materialize(&params, &schedule);
    let preset = match kind {
        SolverKind::Lms => Preset::AdamsBashforth,
        SolverKind::Pc => Preset::UniPc,
        SolverKind::Ss => Preset::DpmSolverSingle,
    };
    let ctx = PresetContext {
        schedule: &schedule,
        grid: &grid,
        prediction,
        tied: false,
        seed: 0,
    };
    let mut coeffs = init_preset(kind, spec.order, spec.n, preset, &ctx)?;
    for v in &mut coeffs.params {
        let z: f64 = StandardNormal.sample(&mut rng);
        *v += 0.1 * z;
    }
    if kind == SolverKind::Ss {
        for i in 1..=spec.n {
            for j in 2..=spec.order {
                let p = coeffs.ss_c(i, j).expect("stage offset");
                coeffs.params[p] = coeffs.params[p].clamp(0.2, 0.9);
            }
        }
    }
    let x0: Vec<f64> = (0..spec.dim)
        .map(|_| schedule.sigma_tilde * { let v: f64 = StandardNormal.sample(&mut rng); v })
        .collect();
    let target: Vec<f64> = (0..spec.dim).map(|_| rng.random_range(-1.5..1.5)).collect();
    Ok(GradProblem {
        schedule,
        model,
        coeffs,
        params,
        x0,
        target,
    })
}

fn rel_dev(adjoint: &[f64], fd: &[f64]) -> f64 {
    let scale = fd
        .iter()
        .chain(adjoint)
        .fold(0.0f64, |m, v| m.max(v.abs()));
    if scale < 1e-12 {
        return 0.0;
    }
    adjoint
        .iter()
        .zip(fd)
        .fold(0.0f64, |m, (a, f)| m.max((a - f).abs()))
        / scale
}

/// Compare adjoint gradients with central differences on randomized
/// instances; deviations above `tolerance` are reported, not raised.
pub fn check_gradients(spec: &GradCheckSpec, tolerance: f64) -> Result<GradCheckReport> {
    if spec.instances == 0 || spec.kinds.is_empty() || spec.predictions.is_empty() {
        return Err(Error::Argument("gradient check needs at least one instance".into()));
    }
    let mut max_rel = BlockDeviation::default();
    let mut failures = Vec::new();
    for index in 0..spec.instances {
        let problem = random_problem(spec, index)?;
        let adj = problem.gradient()?;
        let FdGradient { coeffs: gc, xi: gxi, xi_c: gxc, x0: gx } = problem.finite_differences(spec.fd_step)?;
        let time_adj: Vec<f64> = adj.grad_time.xi.iter().chain(&adj.grad_time.xi_c).copied().collect();
        let time_fd: Vec<f64> = gxi.iter().chain(&gxc).copied().collect();
        let dev = BlockDeviation {
            coeffs: rel_dev(&adj.grad_coeffs, &gc),
            time: rel_dev(&time_adj, &time_fd),
            x0: rel_dev(&adj.grad_x0, &gx),
        };
        max_rel.coeffs = max_rel.coeffs.max(dev.coeffs);
        max_rel.time = max_rel.time.max(dev.time);
        max_rel.x0 = max_rel.x0.max(dev.x0);
        if dev.coeffs > tolerance || dev.time > tolerance || dev.x0 > tolerance {
            failures.push(format!(
                "instance {index} ({} {:?}): coeffs {:.2e}, time {:.2e}, x0 {:.2e}",
                problem.coeffs.kind, problem.coeffs.prediction, dev.coeffs, dev.time, dev.x0
            ));
        }
    }
    Ok(GradCheckReport {
        instances: spec.instances,
        tolerance,
        max_rel,
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::score::{CountingModel, ZeroScore};

    fn vp() -> NoiseSchedule {
        NoiseSchedule::vp_linear()
    }

    #[test]
    fn zero_score_chain_is_linear_in_x0() {
        // With ε ≡ 0 in noise form, x_N = (α_N/α_0) x_0 exactly.
        let s = vp();
        let grid = heuristic_grid(&s, 5, GridKind::LogSnr, 7.0).unwrap();
        let coeffs = SolverCoefficients::zeros(SolverKind::Lms, 2, 5, Prediction::Noise, false).unwrap();
        let model = ZeroScore { dim: 2 };
        let x0 = vec![3.0, -2.0];
        let target = vec![0.1, 0.2];
        let r = loss_and_gradient(&coeffs, None, &grid, &s, &model, &x0, &target).unwrap();
        let ratio = s.alpha(grid.steps[5]) / s.alpha(grid.steps[0]);
        for d in 0..2 {
            let expected = 2.0 * (ratio * x0[d] - target[d]) / 2.0 * ratio;
            assert!((r.grad_x0[d] - expected).abs() < 1e-12 * expected.abs().max(1.0));
        }
        assert!(r.grad_coeffs.iter().all(|g| g.is_finite()));
    }

    #[test]
    fn cotangent_linearity() {
        let spec = GradCheckSpec::default();
        let p = random_problem(&spec, 1).unwrap();
        let grid = materialize(&p.params, &p.schedule);
        let trace = solve(&p.coeffs, &p.schedule, &grid, &p.model, &p.x0).unwrap();
        let l1 = TerminalLoss { value: 0.0, cotangent: vec![1.0, 0.0] };
        let l2 = TerminalLoss { value: 0.0, cotangent: vec![0.0, 1.0] };
        let l3 = TerminalLoss { value: 0.0, cotangent: vec![2.0, -3.0] };
        let b = |l| backward(&trace, &p.coeffs, Some(&p.params), &p.schedule, &p.model, l).unwrap();
        let (g1, g2, g3) = (b(&l1), b(&l2), b(&l3));
        for k in 0..g3.grad_coeffs.len() {
            let lin = 2.0 * g1.grad_coeffs[k] - 3.0 * g2.grad_coeffs[k];
            assert!((g3.grad_coeffs[k] - lin).abs() < 1e-10 * (1.0 + lin.abs()));
        }
        for k in 0..g3.grad_time.xi.len() {
            let lin = 2.0 * g1.grad_time.xi[k] - 3.0 * g2.grad_time.xi[k];
            assert!((g3.grad_time.xi[k] - lin).abs() < 1e-10 * (1.0 + lin.abs()));
        }
    }

    #[test]
    fn zero_cotangent_gives_zero_gradient() {
        let p = random_problem(&GradCheckSpec::default(), 2).unwrap();
        let grid = materialize(&p.params, &p.schedule);
        let trace = solve(&p.coeffs, &p.schedule, &grid, &p.model, &p.x0).unwrap();
        let loss = TerminalLoss { value: 0.0, cotangent: vec![0.0; 2] };
        let r = backward(&trace, &p.coeffs, Some(&p.params), &p.schedule, &p.model, &loss).unwrap();
        assert!(r.grad_coeffs.iter().chain(&r.grad_x0).chain(&r.grad_time.xi).all(|g| *g == 0.0));
    }

    #[test]
    fn reverse_pass_costs_one_vjp_per_evaluation() {
        for kind in [SolverKind::Lms, SolverKind::Ss, SolverKind::Pc] {
            let spec = GradCheckSpec { kinds: vec![kind], ..Default::default() };
            let p = random_problem(&spec, 0).unwrap();
            let model = CountingModel::new(p.model.clone());
            let grid = materialize(&p.params, &p.schedule);
            let trace = solve(&p.coeffs, &p.schedule, &grid, &model, &p.x0).unwrap();
            let loss = mse_loss(trace.terminal(), &p.target);
            backward(&trace, &p.coeffs, Some(&p.params), &p.schedule, &model, &loss).unwrap();
            assert_eq!(model.forward_calls(), p.coeffs.nfe());
            assert!(model.vjp_calls() <= model.forward_calls());
        }
    }

    #[test]
    fn inert_single_step_entries_get_no_gradient() {
        let spec = GradCheckSpec { kinds: vec![SolverKind::Ss], order: 3, ..Default::default() };
        let p = random_problem(&spec, 0).unwrap();
        let r = p.gradient().unwrap();
        for i in 1..=p.coeffs.n {
            for j in 2..=3 {
                for l in j..=3 {
                    let g = ss_a_grad(&p.coeffs, &r.grad_coeffs, i, j, l);
                    assert_eq!(g, 0.0, "a[{i}][{j}][{l}]");
                }
            }
        }
    }

    fn ss_a_grad(c: &SolverCoefficients, g: &[f64], i: usize, j: usize, l: usize) -> f64 {
        g[c.ss_a(i, j, l)]
    }

    #[test]
    fn tied_gradient_sums_untied_rows() {
        let s = vp();
        let model = GaussianMixture::default_toy();
        let grid = heuristic_grid(&s, 4, GridKind::LogSnr, 7.0).unwrap();
        let ctx = PresetContext { schedule: &s, grid: &grid, prediction: Prediction::Data, tied: true, seed: 0 };
        let tied = init_preset(SolverKind::Lms, 2, 4, Preset::Ipndm, &ctx).unwrap();
        let untied_ctx = PresetContext { tied: false, ..ctx };
        let mut untied = init_preset(SolverKind::Lms, 2, 4, Preset::Ipndm, &untied_ctx).unwrap();
        // Make the untied rows equal to the shared block.
        for i in 1..=4 {
            for (j, &k) in tied.lms_row(i).iter().enumerate() {
                let u = lms_index(&untied, i, j);
                untied.params[u] = tied.params[k];
            }
        }
        let x0 = vec![40.0, -30.0];
        let target = vec![0.2, 0.1];
        let gt = loss_and_gradient(&tied, None, &grid, &s, &model, &x0, &target).unwrap();
        let gu = loss_and_gradient(&untied, None, &grid, &s, &model, &x0, &target).unwrap();
        assert!((gt.loss_value - gu.loss_value).abs() < 1e-12);
        for j in 0..2 {
            let sum: f64 = (1..=4)
                .filter(|&i| j < i.min(2))
                .map(|i| gu.grad_coeffs[lms_index(&untied, i, j)])
                .sum();
            let k = lms_index(&tied, 4, j);
            assert!((gt.grad_coeffs[k] - sum).abs() < 1e-9 * (1.0 + sum.abs()), "{j}");
        }
    }

    fn lms_index(c: &SolverCoefficients, i: usize, j: usize) -> usize {
        c.lms_row(i)[j]
    }

    #[test]
    fn default_suite_matches_finite_differences() {
        let spec = GradCheckSpec { instances: 24, ..Default::default() };
        let report = check_gradients(&spec, 1e-4).unwrap();
        assert!(report.passed(), "{:?} {:?}", report.max_rel, report.failures);
    }

    #[test]
    fn other_solver_families_match_finite_differences() {
        for kind in [SolverKind::Ss, SolverKind::Pc] {
            let spec = GradCheckSpec { instances: 8, kinds: vec![kind], order: 3, n: 3, ..Default::default() };
            let report = check_gradients(&spec, 1e-4).unwrap();
            assert!(report.passed(), "{kind}: {:?} {:?}", report.max_rel, report.failures);
        }
    }

    #[test]
    fn mismatched_trace_is_rejected() {
        let s = vp();
        let grid = heuristic_grid(&s, 4, GridKind::LogSnr, 7.0).unwrap();
        let model = ZeroScore { dim: 1 };
        let c2 = SolverCoefficients::zeros(SolverKind::Lms, 2, 4, Prediction::Noise, false).unwrap();
        let c3 = SolverCoefficients::zeros(SolverKind::Lms, 3, 4, Prediction::Noise, false).unwrap();
        let trace = solve(&c2, &s, &grid, &model, &[1.0]).unwrap();
        let loss = mse_loss(trace.terminal(), &[0.0]);
        assert!(matches!(backward(&trace, &c3, None, &s, &model, &loss), Err(Error::Argument(_))));
    }
}
