use std::collections::VecDeque;

use crate::diffusion::NoiseSchedule;
use crate::discretization::TimeGrid;
use crate::error::{Error, Result};
use crate::score::NoisePredictor;
use crate::vector::all_finite;

use super::coeffs::{Prediction, SolverCoefficients, SolverKind};
use super::transfer::{combine, model_output, transfer, Transfer};

/// Which time a recorded quantity was taken at.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimeRef {
    Step(usize),
    Score(usize),
    /// Index into [`SolveTrace::stages`].
    Stage(usize),
}

/// Intermediate stage time of a single-step solver:
/// `λ_s = λ_{i−1} + c (λ_i − λ_{i−1})`, clamped to the schedule's λ range.
#[derive(Debug, Clone, PartialEq)]
pub struct StageTime {
    pub step: usize,
    pub stage: usize,
    pub(crate) c_param: usize,
    pub c: f64,
    pub lambda: f64,
    pub t: f64,
    pub clamped: bool,
}

/// One score evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub time: TimeRef,
    pub t: f64,
    pub eps: Vec<f64>,
    /// ε or x̂ depending on the prediction form.
    pub output: Vec<f64>,
    /// Node id of the evaluated state; `None` for injected history.
    pub(crate) input: Option<usize>,
}

#[derive(Debug, Clone)]
pub(crate) struct Combination {
    pub ta: TimeRef,
    pub tb: TimeRef,
    pub base: usize,
    /// `(parameter index, evaluation id)`
    pub terms: Vec<(usize, usize)>,
    pub out: usize,
    pub tr: Transfer,
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum Op {
    Eval(usize),
    Combine(usize),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SolveDiagnostics {
    /// `(step, stage)` pairs whose stage time hit the end of the schedule.
    pub clamped_stages: Vec<(usize, usize)>,
}

/// Everything a solve produced, including what the reverse pass replays.
#[derive(Debug, Clone)]
pub struct SolveTrace {
    /// `x̃_{t_0} … x̃_{t_N}`
    pub states: Vec<Vec<f64>>,
    pub eps_cache: Vec<Evaluation>,
    pub nfe_used: usize,
    pub diagnostics: SolveDiagnostics,
    pub stages: Vec<StageTime>,
    pub(crate) grid: TimeGrid,
    pub(crate) nodes: Vec<Vec<f64>>,
    pub(crate) trajectory: Vec<usize>,
    pub(crate) combinations: Vec<Combination>,
    pub(crate) ops: Vec<Op>,
    pub(crate) layout: (SolverKind, usize, usize, bool, usize),
}

impl SolveTrace {
    pub fn terminal(&self) -> &[f64] {
        self.states.last().expect("trace holds at least x_T")
    }

    pub(crate) fn matches(&self, coeffs: &SolverCoefficients) -> bool {
        self.layout == layout_of(coeffs)
    }
}

fn layout_of(c: &SolverCoefficients) -> (SolverKind, usize, usize, bool, usize) {
    (c.kind, c.order, c.n, c.tied, c.len())
}

struct Builder<'a, M: ?Sized> {
    coeffs: &'a SolverCoefficients,
    s: &'a NoiseSchedule,
    grid: &'a TimeGrid,
    model: Option<&'a M>,
    lambdas: Vec<f64>,
    nodes: Vec<Vec<f64>>,
    evals: Vec<Evaluation>,
    combinations: Vec<Combination>,
    ops: Vec<Op>,
    stages: Vec<StageTime>,
    diagnostics: SolveDiagnostics,
}

impl<'a, M: NoisePredictor + ?Sized> Builder<'a, M> {
    fn new(
        coeffs: &'a SolverCoefficients,
        s: &'a NoiseSchedule,
        grid: &'a TimeGrid,
        model: Option<&'a M>,
    ) -> Self {
        Self {
            coeffs,
            s,
            grid,
            model,
            lambdas: grid.steps.iter().map(|&t| s.lambda(t)).collect(),
            nodes: Vec::new(),
            evals: Vec::new(),
            combinations: Vec::new(),
            ops: Vec::new(),
            stages: Vec::new(),
            diagnostics: SolveDiagnostics::default(),
        }
    }

    fn time(&self, r: TimeRef) -> f64 {
        match r {
            TimeRef::Step(i) => self.grid.steps[i],
            TimeRef::Score(i) => self.grid.score_times[i],
            TimeRef::Stage(j) => self.stages[j].t,
        }
    }

    fn pred(&self) -> Prediction {
        self.coeffs.prediction
    }

    fn push_node(&mut self, v: Vec<f64>) -> usize {
        self.nodes.push(v);
        self.nodes.len() - 1
    }

    fn eval(&mut self, node: usize, time: TimeRef) -> Result<usize> {
        let t = self.time(time);
        let model = self
            .model
            .ok_or_else(|| Error::State("this step needs a score model".into()))?;
        let (eps, output) = model_output(self.pred(), self.s, model, &self.nodes[node], t)?;
        self.evals.push(Evaluation {
            time,
            t,
            eps,
            output,
            input: Some(node),
        });
        self.ops.push(Op::Eval(self.evals.len() - 1));
        Ok(self.evals.len() - 1)
    }

    fn inject(&mut self, output: Vec<f64>, time: TimeRef) -> usize {
        let t = self.time(time);
        self.evals.push(Evaluation {
            time,
            t,
            eps: Vec::new(),
            output,
            input: None,
        });
        self.evals.len() - 1
    }

    fn combine(
        &mut self,
        step: usize,
        ta: TimeRef,
        tb: TimeRef,
        base: usize,
        terms: Vec<(usize, usize)>,
    ) -> Result<usize> {
        let tr = transfer(self.pred(), self.s, self.time(ta), self.time(tb));
        let refs: Vec<(f64, &[f64])> = terms
            .iter()
            .map(|&(p, e)| (self.coeffs.params[p], self.evals[e].output.as_slice()))
            .collect();
        let y = combine(&tr, &self.nodes[base], &refs);
        if !all_finite(&y) {
            return Err(Error::Divergence { step });
        }
        let out = self.push_node(y);
        self.combinations.push(Combination {
            ta,
            tb,
            base,
            terms,
            out,
            tr,
        });
        self.ops.push(Op::Combine(self.combinations.len() - 1));
        Ok(out)
    }

    fn lms_update(&mut self, i: usize, x_prev: usize, hist: &[usize]) -> Result<usize> {
        let row = self.coeffs.lms_row(i);
        if hist.len() < row.len() {
            return Err(Error::State(format!(
                "step {i} needs {} past evaluations, history holds {}",
                row.len(),
                hist.len()
            )));
        }
        let terms = row.into_iter().zip(hist.iter().copied()).collect();
        self.combine(i, TimeRef::Step(i - 1), TimeRef::Step(i), x_prev, terms)
    }

    /// Returns `(predicted node, fresh evaluation, corrected node)`.
    fn pc_update(
        &mut self,
        i: usize,
        x_prev: usize,
        hist: &[usize],
    ) -> Result<(usize, usize, usize)> {
        let predicted = self.lms_update(i, x_prev, hist)?;
        let fresh = self.eval(predicted, TimeRef::Score(i))?;
        let row = self.coeffs.corrector_row(i);
        let window = std::iter::once(fresh).chain(hist.iter().copied());
        let terms = row.into_iter().zip(window).collect();
        let x = self.combine(i, TimeRef::Step(i - 1), TimeRef::Step(i), x_prev, terms)?;
        Ok((predicted, fresh, x))
    }

    fn stage_time(&mut self, i: usize, j: usize) -> Result<TimeRef> {
        let c_param = self.coeffs.ss_c(i, j).expect("stage 1 has no offset");
        let c = self.coeffs.params[c_param];
        let (la, lb) = (self.lambdas[i - 1], self.lambdas[i]);
        let (lo, hi) = self.s.lambda_range();
        let raw = la + c * (lb - la);
        let lambda = raw.clamp(lo, hi);
        let clamped = lambda != raw;
        if clamped {
            self.diagnostics.clamped_stages.push((i, j));
        }
        let t = self.s.time_from_lambda(lambda)?;
        self.stages.push(StageTime {
            step: i,
            stage: j,
            c_param,
            c,
            lambda,
            t,
            clamped,
        });
        Ok(TimeRef::Stage(self.stages.len() - 1))
    }

    fn ss_update(&mut self, i: usize, x_prev: usize) -> Result<usize> {
        let k = self.coeffs.order;
        let mut kappas = vec![self.eval(x_prev, TimeRef::Score(i - 1))?];
        for j in 2..=k {
            let tb = self.stage_time(i, j)?;
            let terms = (1..j)
                .map(|l| (self.coeffs.ss_a(i, j, l), kappas[l - 1]))
                .collect();
            let u = self.combine(i, TimeRef::Step(i - 1), tb, x_prev, terms)?;
            kappas.push(self.eval(u, tb)?);
        }
        let terms = self.coeffs.ss_b(i).into_iter().zip(kappas).collect();
        self.combine(i, TimeRef::Step(i - 1), TimeRef::Step(i), x_prev, terms)
    }
}

fn check_step(coeffs: &SolverCoefficients, grid: &TimeGrid, i: usize, x: &[f64]) -> Result<()> {
    coeffs.validate()?;
    if grid.n() != coeffs.n {
        return Err(Error::Compatibility(format!(
            "grid has {} steps, coefficients expect {}",
            grid.n(),
            coeffs.n
        )));
    }
    if i < 1 || i > coeffs.n {
        return Err(Error::Argument(format!("step index {i} outside 1..={}", coeffs.n)));
    }
    if !all_finite(x) {
        return Err(Error::NonFiniteInput("solver step"));
    }
    Ok(())
}

/// One linear multistep update. `history[j-1]` is the model output (ε or x̂)
/// from `j` steps back.
pub fn lms_step(
    coeffs: &SolverCoefficients,
    schedule: &NoiseSchedule,
    grid: &TimeGrid,
    i: usize,
    x_prev: &[f64],
    history: &[Vec<f64>],
) -> Result<Vec<f64>> {
    check_step(coeffs, grid, i, x_prev)?;
    if history.is_empty() {
        return Err(Error::State("linear multistep step with empty history".into()));
    }
    let mut b: Builder<'_, dyn NoisePredictor> = Builder::new(coeffs, schedule, grid, None);
    let x = b.push_node(x_prev.to_vec());
    let hist: Vec<usize> = history
        .iter()
        .enumerate()
        .map(|(j, h)| b.inject(h.clone(), TimeRef::Score(i - 1 - j.min(i - 1))))
        .collect();
    let out = b.lms_update(i, x, &hist)?;
    Ok(b.nodes.swap_remove(out))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcStep {
    pub state: Vec<f64>,
    pub predicted: Vec<f64>,
    /// Model output at the predicted state, reused by later steps.
    pub fresh_output: Vec<f64>,
}

/// Predictor (a linear multistep update), one evaluation at the predicted
/// state, then one corrector update over that evaluation and the history.
pub fn pc_step<M: NoisePredictor + ?Sized>(
    coeffs: &SolverCoefficients,
    schedule: &NoiseSchedule,
    grid: &TimeGrid,
    model: &M,
    i: usize,
    x_prev: &[f64],
    history: &[Vec<f64>],
) -> Result<PcStep> {
    check_step(coeffs, grid, i, x_prev)?;
    if history.is_empty() {
        return Err(Error::State("predictor-corrector step with empty history".into()));
    }
    let mut b = Builder::new(coeffs, schedule, grid, Some(model));
    let x = b.push_node(x_prev.to_vec());
    let hist: Vec<usize> = history
        .iter()
        .enumerate()
        .map(|(j, h)| b.inject(h.clone(), TimeRef::Score(i - 1 - j.min(i - 1))))
        .collect();
    let (p, fresh, out) = b.pc_update(i, x, &hist)?;
    Ok(PcStep {
        state: b.nodes[out].clone(),
        predicted: b.nodes[p].clone(),
        fresh_output: b.evals[fresh].output.clone(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SsStep {
    pub state: Vec<f64>,
    pub stages: Vec<StageTime>,
}

/// One single-step (stage-based) update; consumes `k` evaluations.
pub fn ss_step<M: NoisePredictor + ?Sized>(
    coeffs: &SolverCoefficients,
    schedule: &NoiseSchedule,
    grid: &TimeGrid,
    model: &M,
    i: usize,
    x_prev: &[f64],
) -> Result<SsStep> {
    check_step(coeffs, grid, i, x_prev)?;
    let mut b = Builder::new(coeffs, schedule, grid, Some(model));
    let x = b.push_node(x_prev.to_vec());
    let out = b.ss_update(i, x)?;
    Ok(SsStep {
        state: b.nodes.swap_remove(out),
        stages: b.stages,
    })
}

/// Run the solver from `x_T` at `t_0 = T` down to `t_N = t_min`.
pub fn solve<M: NoisePredictor + ?Sized>(
    coeffs: &SolverCoefficients,
    schedule: &NoiseSchedule,
    grid: &TimeGrid,
    model: &M,
    x_t: &[f64],
) -> Result<SolveTrace> {
    coeffs.validate()?;
    grid.check_against(schedule)?;
    if grid.n() != coeffs.n {
        return Err(Error::Compatibility(format!(
            "grid has {} steps, coefficients expect {}",
            grid.n(),
            coeffs.n
        )));
    }
    if x_t.len() != model.dim() {
        return Err(Error::Argument(format!(
            "x_T has dimension {}, model expects {}",
            x_t.len(),
            model.dim()
        )));
    }
    if !all_finite(x_t) {
        return Err(Error::NonFiniteInput("solve"));
    }
    let (n, k) = (coeffs.n, coeffs.order);
    let mut b = Builder::new(coeffs, schedule, grid, Some(model));
    let mut trajectory = vec![b.push_node(x_t.to_vec())];
    let mut hist: VecDeque<usize> = VecDeque::with_capacity(k + 1);
    match coeffs.kind {
        SolverKind::Lms => {
            for i in 1..=n {
                let e = b.eval(trajectory[i - 1], TimeRef::Score(i - 1))?;
                hist.push_front(e);
                hist.truncate(k);
                let h: Vec<usize> = hist.iter().copied().collect();
                trajectory.push(b.lms_update(i, trajectory[i - 1], &h)?);
            }
        }
        SolverKind::Pc => {
            hist.push_front(b.eval(trajectory[0], TimeRef::Score(0))?);
            for i in 1..=n {
                let h: Vec<usize> = hist.iter().copied().collect();
                let (_, fresh, x) = b.pc_update(i, trajectory[i - 1], &h)?;
                hist.push_front(fresh);
                hist.truncate(k);
                trajectory.push(x);
            }
        }
        SolverKind::Ss => {
            for i in 1..=n {
                trajectory.push(b.ss_update(i, trajectory[i - 1])?);
            }
        }
    }
    Ok(SolveTrace {
        states: trajectory.iter().map(|&id| b.nodes[id].clone()).collect(),
        nfe_used: b.evals.len(),
        eps_cache: b.evals,
        diagnostics: b.diagnostics,
        stages: b.stages,
        grid: grid.clone(),
        nodes: b.nodes,
        trajectory,
        combinations: b.combinations,
        ops: b.ops,
        layout: layout_of(coeffs),
    })
}
