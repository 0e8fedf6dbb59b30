//! Property tests for the invariants the library promises.

use proptest::prelude::*;

use difsolve_core::adjoint::{backward, TerminalLoss};
use difsolve_core::diffusion::phi::phi_functions;
use difsolve_core::diffusion::NoiseSchedule;
use difsolve_core::discretization::{heuristic_grid, materialize, GridKind, LearnableTimeParams};
use difsolve_core::harness::{ExperimentConfig, SolverSpec, TrainMode};
use difsolve_core::score::{CountingModel, DataPredictionView, GaussianMixture, MixtureComponent, NoisePredictor};
use difsolve_core::solver::{
    init_preset, nfe, param_count, solve, Prediction, Preset, PresetContext, SolverCoefficients, SolverKind,
};
use difsolve_core::teacher::{draw_noise, teacher_solve, Dataset, TeacherConfig};
use difsolve_core::trainer::project_ball;
use difsolve_core::vector::{distance, norm};

fn schedules() -> [NoiseSchedule; 3] {
    [NoiseSchedule::vp_linear(), NoiseSchedule::ve(80.0), NoiseSchedule::edm()]
}

fn schedule() -> impl Strategy<Value = NoiseSchedule> {
    (0..3usize).prop_map(|i| schedules()[i])
}

/// A time in `[t_min, T]`, log-uniform so the low-noise end is covered.
fn time_in(s: NoiseSchedule, u: f64) -> f64 {
    (s.t_min.ln() + u * (s.t_max.ln() - s.t_min.ln())).exp().clamp(s.t_min, s.t_max)
}

fn mixture(dim: usize, parts: usize) -> impl Strategy<Value = GaussianMixture> {
    prop::collection::vec(
        (0.1f64..1.0, prop::collection::vec(-2.0f64..2.0, dim), 0.01f64..1.0),
        parts,
    )
    .prop_map(|cs| {
        let total: f64 = cs.iter().map(|c| c.0).sum();
        GaussianMixture::new(
            cs.into_iter()
                .map(|(w, mean, scale_sq)| MixtureComponent { weight: w / total, mean, scale_sq })
                .collect(),
        )
        .unwrap()
    })
}

/// Independent oracle: the log density of the noised mixture, written out
/// from the Gaussian pdf without any of the library's score machinery.
fn log_density(m: &GaussianMixture, s: &NoiseSchedule, x: &[f64], t: f64) -> f64 {
    let (a, sg) = (s.alpha(t), s.sigma(t));
    let d = x.len() as f64;
    let logs: Vec<f64> = m
        .components
        .iter()
        .map(|c| {
            let v = a * a * c.scale_sq + sg * sg;
            let sq: f64 = x.iter().zip(&c.mean).map(|(xi, mi)| (xi - a * mi).powi(2)).sum();
            c.weight.ln() - 0.5 * d * (2.0 * std::f64::consts::PI * v).ln() - sq / (2.0 * v)
        })
        .collect();
    let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    top + logs.iter().map(|l| (l - top).exp()).sum::<f64>().ln()
}

fn preset_for(kind: SolverKind) -> Preset {
    match kind {
        SolverKind::Lms => Preset::Ipndm,
        SolverKind::Pc => Preset::UniPc,
        SolverKind::Ss => Preset::DpmSolverSingle,
    }
}

fn kind() -> impl Strategy<Value = SolverKind> {
    prop_oneof![Just(SolverKind::Lms), Just(SolverKind::Ss), Just(SolverKind::Pc)]
}

fn prediction() -> impl Strategy<Value = Prediction> {
    prop_oneof![Just(Prediction::Data), Just(Prediction::Noise)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn schedule_is_positive_with_decreasing_log_snr(s in schedule(), u in 0.0f64..1.0, v in 0.0f64..1.0) {
        let (t1, t2) = (time_in(s, u.min(v)), time_in(s, u.max(v)));
        prop_assert!(s.alpha(t1) > 0.0 && s.sigma(t1) > 0.0);
        if t2 > t1 * (1.0 + 1e-9) {
            prop_assert!(s.lambda(t1) > s.lambda(t2));
        }
    }

    #[test]
    fn lambda_inverts(s in schedule(), u in 0.0f64..1.0) {
        let t = time_in(s, u);
        let back = s.time_from_lambda(s.lambda(t)).unwrap();
        prop_assert!((back - t).abs() <= 1e-10 * t.max(1.0), "t {t} back {back}");
    }

    #[test]
    fn ode_coefficients_match_finite_differences(s in schedule(), u in 0.02f64..0.98) {
        let t = time_in(s, u);
        let h = 1e-5 * t;
        let fd = |f: &dyn Fn(f64) -> f64| (f(t + h) - f(t - h)) / (2.0 * h);
        let c = s.ode_coefficients(t);
        let f_fd = fd(&|t| s.alpha(t).ln());
        let sig2 = s.sigma(t).powi(2);
        let g_fd = fd(&|t| s.sigma(t).powi(2)) - 2.0 * f_fd * sig2;
        prop_assert!((c.f_t - f_fd).abs() <= 1e-6 * c.f_t.abs().max(1e-8), "f {} vs {f_fd}", c.f_t);
        prop_assert!((c.g_sq_t - g_fd).abs() <= 1e-6 * c.g_sq_t.abs(), "g² {} vs {g_fd}", c.g_sq_t);
    }

    #[test]
    fn phi_recurrence(z in prop_oneof![0.5f64..12.0, -12.0f64..-0.5], k in 1usize..5) {
        let p = phi_functions(z, k + 1).unwrap();
        let fact: f64 = (1..=k).map(|i| i as f64).product();
        let rec = (p.get(k) - 1.0 / fact) / z;
        prop_assert!((p.get(k + 1) - rec).abs() <= 1e-12 * p.get(k + 1).abs().max(1e-300) * 100.0,
            "φ_{} = {} vs recurrence {rec}", k + 1, p.get(k + 1));
    }

    #[test]
    fn epsilon_is_scaled_score(m in mixture(2, 3), s in schedule(), u in 0.0f64..1.0, x in prop::collection::vec(-3.0f64..3.0, 2)) {
        let t = time_in(s, u);
        let x: Vec<f64> = x.iter().map(|v| v * s.sigma(t).max(1.0)).collect();
        let eps = m.epsilon(&s, &x, t).unwrap();
        let total: f64 = m.components.iter().map(|c| c.weight).sum();
        prop_assert!((total - 1.0).abs() <= 1e-12);
        for i in 0..2 {
            let h = 1e-5 * s.sigma(t).max(1e-2);
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[i] += h;
            xm[i] -= h;
            let score = (log_density(&m, &s, &xp, t) - log_density(&m, &s, &xm, t)) / (2.0 * h);
            let want = -s.sigma(t) * score;
            prop_assert!((eps[i] - want).abs() <= 1e-5 * want.abs().max(1.0), "ε {} vs {want}", eps[i]);
        }
    }

    #[test]
    fn epsilon_vjp_matches_finite_differences(m in mixture(2, 3), s in schedule(), u in 0.05f64..0.95,
                                              x in prop::collection::vec(-2.0f64..2.0, 2),
                                              c in prop::collection::vec(-1.0f64..1.0, 2)) {
        let t = time_in(s, u);
        let x: Vec<f64> = x.iter().map(|v| v * s.sigma(t).max(1.0)).collect();
        let out = m.epsilon_vjp(&s, &x, t, &c).unwrap();
        let f = |x: &[f64], t: f64| -> f64 {
            m.epsilon(&s, x, t).unwrap().iter().zip(&c).map(|(a, b)| a * b).sum()
        };
        let hx = 1e-5 * s.sigma(t).max(1e-2);
        for i in 0..2 {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[i] += hx;
            xm[i] -= hx;
            let fd = (f(&xp, t) - f(&xm, t)) / (2.0 * hx);
            prop_assert!((out.grad_x[i] - fd).abs() <= 1e-5 * fd.abs().max(1.0), "x{i}: {} vs {fd}", out.grad_x[i]);
        }
        let ht = 1e-6 * t;
        let fd = (f(&x, t + ht) - f(&x, t - ht)) / (2.0 * ht);
        prop_assert!((out.grad_t - fd).abs() <= 1e-5 * fd.abs().max(1.0), "t: {} vs {fd}", out.grad_t);
    }

    #[test]
    fn data_prediction_round_trip(m in mixture(3, 2), s in schedule(), u in 0.0f64..1.0, x in prop::collection::vec(-3.0f64..3.0, 3)) {
        let t = time_in(s, u);
        let view = DataPredictionView::new(&m, &s);
        let x_hat = view.x_hat(&x, t).unwrap();
        let eps = m.epsilon(&s, &x, t).unwrap();
        let back = view.epsilon_from(&x, &x_hat, t);
        prop_assert!(distance(&back, &eps) <= 1e-12 * norm(&eps).max(1.0) * (s.alpha(t) / s.sigma(t)).max(1.0));
    }

    #[test]
    fn materialized_grid_is_monotone_and_clipped(s in schedule(), xi in prop::collection::vec(-15.0f64..15.0, 2..40),
                                                 offsets in prop::collection::vec(-100.0f64..100.0, 40), clip in 0.05f64..0.95) {
        let n = xi.len() - 1;
        let p = LearnableTimeParams { xi: xi.clone(), xi_c: offsets[..=n].to_vec(), clip_fraction: clip };
        let g = materialize(&p, &s);
        prop_assert_eq!(g.steps[0], s.t_max);
        prop_assert_eq!(g.steps[n], s.t_min);
        prop_assert!(g.steps.windows(2).all(|w| w[0] > w[1]));
        let min_gap = g.steps.windows(2).map(|w| w[0] - w[1]).fold(f64::INFINITY, f64::min);
        let delta = p.max_offset(&s);
        // realized gaps are differences of cumulative sums, exact only to ulp(T)
        prop_assert!(delta <= clip * (min_gap + 4.0 * f64::EPSILON * s.t_max));
        prop_assert_eq!(g.score_times[0], g.steps[0]);
        prop_assert_eq!(g.score_times[n], g.steps[n]);
        for i in 1..n {
            // the sum steps[i] + offset rounds at the scale of steps[i]
            prop_assert!((g.score_times[i] - g.steps[i]).abs() <= delta + 2.0 * f64::EPSILON * g.steps[i]);
        }
    }

    #[test]
    fn log_snr_grid_is_uniform_in_lambda(s in schedule(), n in 1usize..60) {
        let g = heuristic_grid(&s, n, GridKind::LogSnr, 7.0).unwrap();
        let lam: Vec<f64> = g.steps.iter().map(|&t| s.lambda(t)).collect();
        let h = (lam[n] - lam[0]) / n as f64;
        for w in lam.windows(2) {
            prop_assert!((w[1] - w[0] - h).abs() <= 1e-8);
        }
    }

    #[test]
    fn edm_grid_with_unit_rho_is_uniform_in_kappa(s in schedule(), n in 1usize..60) {
        let g = heuristic_grid(&s, n, GridKind::Edm, 1.0).unwrap();
        let k: Vec<f64> = g.steps.iter().map(|&t| s.kappa(t)).collect();
        let h = (k[n] - k[0]) / n as f64;
        for w in k.windows(2) {
            prop_assert!((w[1] - w[0] - h).abs() <= 1e-8 * k[0].abs().max(1.0));
        }
    }

    #[test]
    fn ball_projection(x in prop::collection::vec(-5.0f64..5.0, 1..6), d in prop::collection::vec(-5.0f64..5.0, 6),
                       r in 0.0f64..2.0, sigma in 0.1f64..80.0) {
        let xp: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + b).collect();
        let p = project_ball(&xp, &x, r, sigma);
        prop_assert!(distance(&p, &x) <= r * sigma + 1e-12);
        if distance(&xp, &x) <= r * sigma {
            prop_assert_eq!(&p, &xp);
        }
    }

    #[test]
    fn layout_matches_parameter_count(kind in kind(), k in 1usize..=5, extra in 0usize..12, pred in prediction()) {
        let n = k + extra;
        let c = SolverCoefficients::zeros(kind, k, n, pred, false).unwrap();
        prop_assert_eq!(c.len(), param_count(kind, k, n));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn solve_spends_exactly_the_nfe(kind in kind(), k in 1usize..=3, extra in 0usize..6, pred in prediction(),
                                    s in schedule(), seed in 0u64..1000) {
        let n = k + extra;
        let grid = heuristic_grid(&s, n, GridKind::LogSnr, 7.0).unwrap();
        let ctx = PresetContext { schedule: &s, grid: &grid, prediction: pred, tied: false, seed };
        let c = init_preset(kind, k, n, preset_for(kind), &ctx).unwrap();
        let model = CountingModel::new(GaussianMixture::default_toy());
        let x = draw_noise(2, s.sigma_tilde, seed, 0);
        let a = solve(&c, &s, &grid, &model, &x).unwrap();
        prop_assert_eq!(model.forward_calls(), nfe(kind, k, n));
        prop_assert_eq!(a.nfe_used, nfe(kind, k, n));
        // bit-identical on a second run
        let b = solve(&c, &s, &grid, &model, &x).unwrap();
        prop_assert_eq!(a.states, b.states);
    }

    #[test]
    fn backward_is_linear_in_the_cotangent(kind in kind(), k in 1usize..=3, extra in 0usize..4, pred in prediction(),
                                           s in schedule(), seed in 0u64..1000,
                                           ca in prop::collection::vec(-1.0f64..1.0, 2),
                                           cb in prop::collection::vec(-1.0f64..1.0, 2),
                                           w in -3.0f64..3.0) {
        let n = k + extra;
        let grid = heuristic_grid(&s, n, GridKind::LogSnr, 7.0).unwrap();
        let ctx = PresetContext { schedule: &s, grid: &grid, prediction: pred, tied: false, seed };
        let c = init_preset(kind, k, n, preset_for(kind), &ctx).unwrap();
        let p = LearnableTimeParams::from_grid(&grid, 0.5).unwrap();
        let model = GaussianMixture::default_toy();
        let x = draw_noise(2, s.sigma_tilde, seed, 1);
        let trace = solve(&c, &s, &grid, &model, &x).unwrap();
        let run = |cot: Vec<f64>| backward(&trace, &c, Some(&p), &s, &model, &TerminalLoss { value: 0.0, cotangent: cot }).unwrap();
        let (ga, gb) = (run(ca.clone()), run(cb.clone()));
        let gab = run(ca.iter().zip(&cb).map(|(a, b)| a + w * b).collect());
        let close = |x: &[f64], y: &[f64], z: &[f64]| {
            x.iter().zip(y).zip(z).all(|((a, b), c)| (a + w * b - c).abs() <= 1e-9 * (a.abs() + (w * b).abs() + 1.0))
        };
        prop_assert!(close(&ga.grad_coeffs, &gb.grad_coeffs, &gab.grad_coeffs));
        prop_assert!(close(&ga.grad_x0, &gb.grad_x0, &gab.grad_x0));
        prop_assert!(close(&ga.grad_time.xi, &gb.grad_time.xi, &gab.grad_time.xi));
        prop_assert!(close(&ga.grad_time.xi_c, &gb.grad_time.xi_c, &gab.grad_time.xi_c));
        prop_assert!(ga.grad_coeffs.iter().chain(&ga.grad_x0).all(|v| v.is_finite()));
    }

    #[test]
    fn config_round_trips(seed in any::<u64>(), order in 1usize..=3, extra in 0usize..20, train in 1usize..5000,
                          lr in 1e-5f64..1.0, radius in prop::option::of(0.0f64..1.0), mode_i in 0usize..5) {
        let mut c = ExperimentConfig { seed, ..ExperimentConfig::default() };
        c.solver = SolverSpec { order, nfe: order + extra, ..c.solver };
        c.data.train = train;
        c.train.coeff_optimizer.lr = lr;
        c.train.radius = radius;
        c.sweep.modes = vec![[TrainMode::Baseline, TrainMode::S4s, TrainMode::S4sAlt, TrainMode::Joint, TrainMode::ScheduleOnly][mode_i]];
        let back = ExperimentConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        prop_assert_eq!(&back, &c);
        prop_assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn teacher_is_deterministic(s in schedule(), seed in 0u64..1000, i in 0u64..1000) {
        let m = GaussianMixture::default_toy();
        let x = draw_noise(2, s.sigma_tilde, seed, i);
        prop_assert_eq!(x.clone(), draw_noise(2, s.sigma_tilde, seed, i));
        let cfg = TeacherConfig::adaptive(1e-6);
        prop_assert_eq!(teacher_solve(&cfg, &s, &m, &x).unwrap(), teacher_solve(&cfg, &s, &m, &x).unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn dataset_bytes_round_trip(train in 1usize..12, validation in 0usize..5, seed in any::<u64>()) {
        let s = NoiseSchedule::vp_linear();
        let d = Dataset::generate(&TeacherConfig::adaptive(1e-6), &s, &GaussianMixture::default_toy(), train, validation, seed).unwrap();
        let back = Dataset::from_bytes(&d.to_bytes(), std::path::Path::new("mem")).unwrap();
        prop_assert_eq!(back.checksum(), d.checksum());
        prop_assert_eq!(back, d);
    }
}
