use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::adjoint::{check_gradients, GradCheckSpec};
use crate::diffusion::phi::{phi_closed_form, phi_series};
use crate::diffusion::NoiseSchedule;
use crate::discretization::{heuristic_grid, materialize, uniform_steps, GridKind, LearnableTimeParams};
use crate::score::GaussianMixture;
use crate::solver::{param_count, SolverCoefficients, SolverKind, Prediction};
use crate::teacher::{draw_noise, teacher_solve, TeacherConfig};
use crate::trainer::project_ball;
use crate::vector::distance;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelfTestResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, f: impl FnOnce() -> Result<String, String>) -> SelfTestResult {
    match f() {
        Ok(detail) => SelfTestResult { name, passed: true, detail },
        Err(detail) => SelfTestResult { name, passed: false, detail },
    }
}

/// Fast invariant suite over the core building blocks.
pub fn selftest() -> Vec<SelfTestResult> {
    let vp = NoiseSchedule::vp_linear();
    vec![
        check("parameter-counts", || {
            for kind in [SolverKind::Lms, SolverKind::Ss, SolverKind::Pc] {
                for k in 1..=4 {
                    for n in k..=10 {
                        let c = SolverCoefficients::zeros(kind, k, n, Prediction::Data, false)
                            .map_err(|e| e.to_string())?;
                        if c.len() != param_count(kind, k, n) {
                            return Err(format!("{kind} k={k} N={n}: layout {} vs formula {}", c.len(), param_count(kind, k, n)));
                        }
                    }
                }
            }
            Ok("layouts match the closed forms for k ≤ 4, N ≤ 10".into())
        }),
        check("phi-branches", || {
            let (a, b) = (phi_closed_form(1e-4, 2), phi_series(1e-4, 2));
            let dev = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            if dev <= 1e-10 { Ok(format!("max deviation {dev:.1e}")) } else { Err(format!("max deviation {dev:.1e}")) }
        }),
        check("uniform-time-params", || {
            let g = materialize(&LearnableTimeParams::uniform(8, 0.5), &vp);
            let u = uniform_steps(vp.t_max, vp.t_min, 8);
            let dev = distance(&g.steps, &u);
            if dev <= 1e-12 { Ok(format!("deviation {dev:.1e}")) } else { Err(format!("deviation {dev:.1e}")) }
        }),
        check("log-snr-grid", || {
            let g = heuristic_grid(&vp, 10, GridKind::LogSnr, 7.0).map_err(|e| e.to_string())?;
            let lam: Vec<f64> = g.steps.iter().map(|&t| vp.lambda(t)).collect();
            let h = (lam[10] - lam[0]) / 10.0;
            let dev = lam.windows(2).map(|w| (w[1] - w[0] - h).abs()).fold(0.0, f64::max);
            if dev <= 1e-8 { Ok(format!("λ spacing deviation {dev:.1e}")) } else { Err(format!("λ spacing deviation {dev:.1e}")) }
        }),
        check("ball-projection", || {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            for _ in 0..200 {
                let x: Vec<f64> = (0..3).map(|_| rng.random_range(-5.0..5.0)).collect();
                let xp: Vec<f64> = (0..3).map(|_| rng.random_range(-5.0..5.0)).collect();
                let r = rng.random_range(0.0..1.0);
                let p = project_ball(&xp, &x, r, 2.0);
                if distance(&p, &x) > 2.0 * r + 1e-12 || distance(&project_ball(&p, &x, r, 2.0), &p) > 1e-12 {
                    return Err("projection left the ball or was not idempotent".into());
                }
            }
            Ok("200 random projections".into())
        }),
        check("teacher-agreement", || {
            let model = GaussianMixture::isotropic(vec![0.3, -0.7], 0.5).map_err(|e| e.to_string())?;
            let x = draw_noise(2, vp.sigma_tilde, 0, 0);
            let a = teacher_solve(&TeacherConfig::exact(), &vp, &model, &x).map_err(|e| e.to_string())?;
            let b = teacher_solve(&TeacherConfig::adaptive(1e-10), &vp, &model, &x).map_err(|e| e.to_string())?;
            let d = distance(&a, &b);
            if d <= 1e-8 { Ok(format!("closed form vs adaptive {d:.1e}")) } else { Err(format!("closed form vs adaptive {d:.1e}")) }
        }),
        check("adjoint-gradients", || {
            let spec = GradCheckSpec { instances: 12, ..GradCheckSpec::default() };
            let r = check_gradients(&spec, 1e-4).map_err(|e| e.to_string())?;
            let m = r.max_rel;
            let detail = format!("max relative deviation: coeffs {:.1e}, time {:.1e}, x0 {:.1e}", m.coeffs, m.time, m.x0);
            if r.passed() { Ok(detail) } else { Err(detail) }
        }),
    ]
}
