use super::*;
use crate::discretization::{heuristic_grid, GridKind};
use crate::score::GaussianMixture;
use crate::solver::{init_preset, Prediction, Preset, PresetContext, SolverKind};
use crate::teacher::TeacherConfig;

struct Toy {
    s: NoiseSchedule,
    model: GaussianMixture,
    data: Dataset,
}

fn toy(train: usize, validation: usize, teacher: &TeacherConfig) -> Toy {
    let s = NoiseSchedule::vp_linear();
    let model = GaussianMixture::default_toy();
    let data = Dataset::generate(teacher, &s, &model, train, validation, 5).unwrap();
    Toy { s, model, data }
}

fn preset(t: &Toy, n: usize, k: usize, p: Preset) -> (SolverCoefficients, TimeGrid) {
    let grid = heuristic_grid(&t.s, n, GridKind::LogSnr, 7.0).unwrap();
    let ctx = PresetContext {
        schedule: &t.s,
        grid: &grid,
        prediction: Prediction::Data,
        tied: false,
        seed: 0,
    };
    (init_preset(SolverKind::Lms, k, n, p, &ctx).unwrap(), grid)
}

fn small() -> TrainConfig {
    TrainConfig {
        epochs: 3,
        alternations: 2,
        batch_size: 16,
        ..TrainConfig::default()
    }
}

#[test]
fn radius_rule() {
    let c = TrainConfig::default();
    assert!((c.radius_for(6) - 0.1).abs() < 1e-12);
    assert!((c.radius_for(24) - 0.1 * (6.0f64 / 24.0).powf(2.5)).abs() < 1e-15);
    let fixed = TrainConfig {
        radius: Some(0.0),
        ..c
    };
    assert_eq!(fixed.radius_for(6), 0.0);
}

#[test]
fn zero_radius_never_moves_inputs() {
    let mut t = toy(48, 8, &TeacherConfig::default());
    let (c, g) = preset(&t, 4, 2, Preset::Ipndm);
    let cfg = TrainConfig {
        radius: Some(0.0),
        ..small()
    };
    let out = train_s4s(&mut t.data, &c, &g, &t.s, &t.model, &cfg).unwrap();
    assert!(t.data.records().all(|r| r.x_t == r.x_t_prime));
    assert_eq!(out.stats.projection_violations, 0);
    assert!(out.stats.max_ball_excess <= 0.0);
}

#[test]
fn inputs_stay_inside_their_ball() {
    let mut t = toy(64, 8, &TeacherConfig::default());
    let (c, g) = preset(&t, 4, 2, Preset::Ipndm);
    let cfg = TrainConfig {
        radius: Some(0.05),
        x_prime_lr: 5.0,
        ..small()
    };
    let out = train_s4s(&mut t.data, &c, &g, &t.s, &t.model, &cfg).unwrap();
    assert_eq!(out.stats.projection_checks, out.stats.iterations * 64);
    assert_eq!(out.stats.projection_violations, 0);
    assert!(t.data.train.iter().any(|r| r.x_t != r.x_t_prime));
    assert!(t.data.validation.iter().all(|r| r.x_t == r.x_t_prime));
    // Large steps push many inputs onto the boundary.
    assert!(out.stats.max_ball_excess > -1e-9);
}

#[test]
fn student_equal_to_teacher_has_nothing_to_learn() {
    let teacher = TeacherConfig {
        fine_order: 2,
        ..TeacherConfig::fine(5)
    };
    let mut t = toy(32, 8, &teacher);
    let (c, g) = preset(&t, 5, 2, Preset::AdamsBashforth);
    let cfg = TrainConfig {
        radius: Some(0.0),
        ..small()
    };
    let out = train_s4s(&mut t.data, &c, &g, &t.s, &t.model, &cfg).unwrap();
    assert!(out.history[0].train_loss < 1e-28, "{}", out.history[0].train_loss);
    assert!(out.stats.initial_validation_loss < 1e-28);
    for (a, b) in out.coeffs.params.iter().zip(&c.params) {
        assert!((a - b).abs() < 1e-8);
    }
}

#[test]
fn training_improves_on_ipndm() {
    let mut t = toy(200, 50, &TeacherConfig::default());
    let (c, g) = preset(&t, 6, 3, Preset::Ipndm);
    let cfg = TrainConfig {
        epochs: 6,
        ..TrainConfig::default()
    };
    let out = train_s4s(&mut t.data, &c, &g, &t.s, &t.model, &cfg).unwrap();
    assert!(out.diverged.is_none());
    let (a, b) = (out.stats.initial_validation_loss, out.stats.final_validation_loss);
    assert!(b < a, "{a:e} -> {b:e}");
    assert_eq!(out.history.len(), 7);
    assert_eq!(out.history.last().unwrap().iteration, 6 * 7);
}

#[test]
fn zero_alternations_return_inputs() {
    let mut t = toy(16, 4, &TeacherConfig::default());
    let (c, g) = preset(&t, 4, 2, Preset::Ipndm);
    let p = LearnableTimeParams::from_grid(&g, 0.5).unwrap();
    let cfg = TrainConfig {
        alternations: 0,
        ..small()
    };
    let before = t.data.clone();
    let out = train_s4s_alt(&mut t.data, &c, &p, &t.s, &t.model, &cfg).unwrap();
    assert_eq!(out.coeffs, c);
    assert_eq!(out.params.as_ref(), Some(&p));
    assert_eq!(t.data, before);
    assert_eq!(out.stats.iterations, 0);
}

#[test]
fn frozen_blocks_reduce_joint_training() {
    let t = toy(40, 8, &TeacherConfig::default());
    let (c, g) = preset(&t, 4, 2, Preset::Ipndm);
    let p = LearnableTimeParams::from_grid(&g, 0.5).unwrap();
    let grid = materialize(&p, &t.s);

    let no_time = TrainConfig {
        frozen: FrozenBlocks { coeffs: false, time: true },
        ..small()
    };
    let mut d1 = t.data.clone();
    let joint = train_joint(&mut d1, &c, &p, &t.s, &t.model, &no_time).unwrap();
    let mut d2 = t.data.clone();
    let s4s = train_s4s(&mut d2, &c, &grid, &t.s, &t.model, &no_time).unwrap();
    assert_eq!(joint.coeffs, s4s.coeffs);
    assert_eq!(joint.params.as_ref(), Some(&p));
    assert_eq!(d1, d2);

    let no_coeffs = TrainConfig {
        frozen: FrozenBlocks { coeffs: true, time: false },
        ..small()
    };
    let mut d1 = t.data.clone();
    let joint = train_joint(&mut d1, &c, &p, &t.s, &t.model, &no_coeffs).unwrap();
    let mut d2 = t.data.clone();
    let sched = train_schedule_only(&mut d2, &c, &p, &t.s, &t.model, &no_coeffs).unwrap();
    assert_eq!(joint.coeffs, c);
    assert_eq!(joint.params, sched.params);
    assert_ne!(joint.params.as_ref(), Some(&p));
}

#[test]
fn training_is_deterministic() {
    let t = toy(40, 8, &TeacherConfig::default());
    let (c, g) = preset(&t, 4, 2, Preset::Ipndm);
    let p = LearnableTimeParams::from_grid(&g, 0.5).unwrap();
    let run = || {
        let mut d = t.data.clone();
        let o = train_s4s_alt(&mut d, &c, &p, &t.s, &t.model, &small()).unwrap();
        (o.coeffs, o.params, o.history, d)
    };
    assert_eq!(run(), run());
}

#[test]
fn consistency_is_maintained() {
    let mut t = toy(40, 8, &TeacherConfig::default());
    let (c, g) = preset(&t, 4, 3, Preset::Ipndm);
    let cfg = TrainConfig {
        consistency: true,
        ..small()
    };
    let out = train_s4s(&mut t.data, &c, &g, &t.s, &t.model, &cfg).unwrap();
    for row in out.coeffs.consistency_rows() {
        let s: f64 = row.iter().map(|&k| out.coeffs.params[k]).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}

#[test]
fn divergence_stops_with_finite_parameters() {
    let mut t = toy(64, 8, &TeacherConfig::default());
    let (c, g) = preset(&t, 4, 2, Preset::Ipndm);
    let cfg = TrainConfig {
        coeff_optimizer: AdamConfig {
            lr: 1e170,
            ..AdamConfig::default()
        },
        ..small()
    };
    let out = train_s4s(&mut t.data, &c, &g, &t.s, &t.model, &cfg).unwrap();
    let d = out.diverged.expect("huge steps diverge");
    assert!(d.iteration >= 1);
    assert!(out.coeffs.params.iter().all(|v| v.is_finite()));
}

#[test]
fn history_round_trips_through_csv() {
    let mut t = toy(16, 4, &TeacherConfig::default());
    let (c, g) = preset(&t, 4, 2, Preset::Ipndm);
    let out = train_s4s(&mut t.data, &c, &g, &t.s, &t.model, &small()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("h.csv");
    write_history(&path, &out.history).unwrap();
    assert_eq!(read_history(&path).unwrap(), out.history);
    let header = std::fs::read_to_string(&path).unwrap();
    assert!(header.starts_with("iteration,epoch,phase,train_loss,validation_loss,radius"));
}

#[test]
fn evaluation_is_zero_for_the_teacher_and_reproducible() {
    let teacher = TeacherConfig {
        fine_order: 2,
        ..TeacherConfig::fine(5)
    };
    let t = toy(1, 1, &teacher);
    let (c, g) = preset(&t, 5, 2, Preset::AdamsBashforth);
    let cases = fresh_cases(&teacher, &t.s, &t.model, 20, 3).unwrap();
    let m = evaluate(&c, &g, &t.s, &t.model, &cases).unwrap();
    assert_eq!(m.max, 0.0);
    let again = fresh_cases(&teacher, &t.s, &t.model, 20, 3).unwrap();
    assert_eq!(cases, again);
    let (ip, _) = preset(&t, 5, 2, Preset::Ipndm);
    let a = evaluate(&ip, &g, &t.s, &t.model, &cases).unwrap();
    assert!(a.mean > 0.0 && a.median <= a.max && a.nfe == 5);
}

#[test]
fn mismatched_dataset_is_rejected() {
    let mut t = toy(4, 1, &TeacherConfig::default());
    t.data.dim = 3;
    let (c, g) = preset(&t, 4, 2, Preset::Ipndm);
    let r = train_s4s(&mut t.data, &c, &g, &t.s, &t.model, &small());
    assert!(matches!(r, Err(Error::Compatibility(_))));
}
