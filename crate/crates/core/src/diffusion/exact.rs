//! Reference evaluation of the exact one-step map of the diffusion ODE,
//!
//! `x_t = (α_t/α_s) x_s − α_t ∫_{λ_s}^{λ_t} e^{−λ} ε(x_λ, λ) dλ`,
//!
//! with the integral resolved by Gauss–Legendre collocation in λ. The state
//! inside the integral is unknown, so `y = x/α` is integrated along with it:
//! `dy/dλ = −e^{−λ} ε(α_λ y, t_λ)`. Slow, but accurate to ~1e-12; used by
//! tests as an oracle, never on the fast path.

use crate::diffusion::quadrature::gauss_legendre;
use crate::diffusion::schedule::NoiseSchedule;
use crate::error::{Error, Result};
use crate::vector::{all_finite, axpy, norm};

const NODES: usize = 6;
const MAX_SUBINTERVALS: usize = 4096;
const PICARD_ITERS: usize = 200;
const INITIAL_WIDTH: f64 = 0.25;
const TOL: f64 = 1e-13;

struct Collocation {
    nodes: Vec<f64>,
    weights: Vec<f64>,
    /// `a[l][j] = ∫_0^{c_l} L_j(s) ds`
    a: Vec<Vec<f64>>,
}

impl Collocation {
    fn new(m: usize) -> Self {
        let (nodes, weights) = gauss_legendre(m);
        let mut a = vec![vec![0.0; m]; m];
        for j in 0..m {
            // Lagrange basis polynomial L_j in monomial form.
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
            for l in 0..m {
                a[l][j] = poly
                    .iter()
                    .enumerate()
                    .map(|(p, &c)| c * nodes[l].powi(p as i32 + 1) / (p + 1) as f64)
                    .sum();
            }
        }
        Self { nodes, weights, a }
    }
}

/// Exact state at `t_next` starting from `x_prev` at `t_prev` (`t_next < t_prev`).
pub fn exact_step_integrand<F>(
    schedule: &NoiseSchedule,
    x_prev: &[f64],
    t_prev: f64,
    t_next: f64,
    eps_fn: F,
) -> Result<Vec<f64>>
where
    F: Fn(&[f64], f64) -> Result<Vec<f64>>,
{
    schedule.check_time(t_prev)?;
    schedule.check_time(t_next)?;
    if t_next >= t_prev {
        return Err(Error::Argument(format!(
            "exact step needs t_next < t_prev, got {t_next} >= {t_prev}"
        )));
    }
    if !all_finite(x_prev) {
        return Err(Error::NonFiniteInput("exact_step_integrand"));
    }
    let lam_a = schedule.lambda(t_prev);
    let lam_b = schedule.lambda(t_next);
    let y0: Vec<f64> = x_prev.iter().map(|v| v / schedule.alpha(t_prev)).collect();
    let colloc = Collocation::new(NODES);

    let mut n = (((lam_b - lam_a) / INITIAL_WIDTH).ceil() as usize).max(1);
    let mut coarse = integrate(schedule, &colloc, &y0, lam_a, lam_b, n, &eps_fn)?;
    let mut last_change = f64::INFINITY;
    while n < MAX_SUBINTERVALS {
        n *= 2;
        let fine = integrate(schedule, &colloc, &y0, lam_a, lam_b, n, &eps_fn)?;
        let diff: f64 = norm(&crate::vector::sub(&fine, &coarse));
        last_change = diff;
        coarse = fine;
        if diff <= TOL * (1.0 + norm(&coarse)) {
            let alpha_b = schedule.alpha(t_next);
            return Ok(coarse.iter().map(|v| alpha_b * v).collect());
        }
    }
    Err(Error::Numerical {
        what: "exact_step_integrand",
        detail: format!(
            "quadrature did not converge with {n} subintervals over λ ∈ [{lam_a:.6}, {lam_b:.6}]; \
             last refinement changed the result by {last_change:.3e}"
        ),
    })
}

fn integrate<F>(
    schedule: &NoiseSchedule,
    colloc: &Collocation,
    y0: &[f64],
    lam_a: f64,
    lam_b: f64,
    n: usize,
    eps_fn: &F,
) -> Result<Vec<f64>>
where
    F: Fn(&[f64], f64) -> Result<Vec<f64>>,
{
    let d = y0.len();
    let m = colloc.nodes.len();
    let h = (lam_b - lam_a) / n as f64;
    let mut y = y0.to_vec();
    let rhs = |lam: f64, yv: &[f64]| -> Result<Vec<f64>> {
        let t = schedule.time_from_lambda(lam)?;
        let a = schedule.alpha(t);
        let x: Vec<f64> = yv.iter().map(|v| a * v).collect();
        let e = eps_fn(&x, t)?;
        let w = -(-lam).exp();
        Ok(e.iter().map(|v| w * v).collect())
    };
    for s in 0..n {
        let lam0 = lam_a + s as f64 * h;
        let lams: Vec<f64> = colloc.nodes.iter().map(|c| lam0 + c * h).collect();
        let mut f: Vec<Vec<f64>> = lams
            .iter()
            .map(|&l| rhs(l, &y))
            .collect::<Result<_>>()?;
        let mut converged = false;
        for _ in 0..PICARD_ITERS {
            let mut change = 0.0f64;
            let mut next_f = Vec::with_capacity(m);
            for l in 0..m {
                let mut stage = y.clone();
                for j in 0..m {
                    axpy(h * colloc.a[l][j], &f[j], &mut stage);
                }
                let fl = rhs(lams[l], &stage)?;
                change = change.max(
                    fl.iter()
                        .zip(&f[l])
                        .map(|(a, b)| (a - b).abs())
                        .fold(0.0, f64::max),
                );
                next_f.push(fl);
            }
            f = next_f;
            let scale = f.iter().flatten().fold(1e-300, |m: f64, v| m.max(v.abs()));
            if change <= 1e-15 * scale {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::Numerical {
                what: "exact_step_integrand",
                detail: format!("collocation fixed point failed on subinterval {s} of {n}"),
            });
        }
        for j in 0..m {
            axpy(h * colloc.weights[j], &f[j], &mut y);
        }
        if !all_finite(&y) || y.len() != d {
            return Err(Error::Numerical {
                what: "exact_step_integrand",
                detail: format!("non-finite state on subinterval {s} of {n}"),
            });
        }
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_score_gives_signal_scaling() {
        let s = NoiseSchedule::vp_linear();
        let x = [0.7, -1.3];
        let out = exact_step_integrand(&s, &x, 0.8, 0.3, |x, _| Ok(vec![0.0; x.len()])).unwrap();
        let r = s.alpha(0.3) / s.alpha(0.8);
        for (o, xi) in out.iter().zip(&x) {
            assert!((o - r * xi).abs() < 1e-14);
        }
    }

    #[test]
    fn constant_score_matches_analytic_integral() {
        let s = NoiseSchedule::vp_linear();
        let x = [0.5, 2.0];
        let c = [0.3, -0.8];
        let (tp, tn) = (0.9, 0.2);
        let out = exact_step_integrand(&s, &x, tp, tn, |_, _| Ok(c.to_vec())).unwrap();
        let h = s.lambda(tn) - s.lambda(tp);
        for i in 0..2 {
            let expect = s.alpha(tn) / s.alpha(tp) * x[i] - s.sigma(tn) * h.exp_m1() * c[i];
            assert!((out[i] - expect).abs() < 1e-11, "{} vs {}", out[i], expect);
        }
    }

    #[test]
    fn isotropic_gaussian_matches_closed_form() {
        // ε(x,t) = σ x / (α² s² + σ²) for data N(0, s² I).
        let s2 = 0.5;
        for sched in [NoiseSchedule::vp_linear(), NoiseSchedule::edm()] {
            let eps = |x: &[f64], t: f64| {
                let (a, sg) = (sched.alpha(t), sched.sigma(t));
                Ok(x.iter().map(|v| sg * v / (a * a * s2 + sg * sg)).collect())
            };
            let tp = sched.t_max * 0.6;
            let tn = sched.t_max * 0.05;
            let x = [1.1, -0.4];
            let out = exact_step_integrand(&sched, &x, tp, tn, eps).unwrap();
            let var = |t: f64| sched.alpha(t).powi(2) * s2 + sched.sigma(t).powi(2);
            let ratio = (var(tn) / var(tp)).sqrt();
            for i in 0..2 {
                assert!((out[i] - ratio * x[i]).abs() < 1e-8 * x[i].abs().max(1.0));
            }
        }
    }

    #[test]
    fn rejects_forward_steps() {
        let s = NoiseSchedule::vp_linear();
        let r = exact_step_integrand(&s, &[1.0], 0.2, 0.5, |x, _| Ok(x.to_vec()));
        assert!(matches!(r, Err(Error::Argument(_))));
    }
}
