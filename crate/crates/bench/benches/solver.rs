use criterion::{criterion_group, criterion_main, BatchSize, BenchmarkId, Criterion};
use std::hint::black_box;

use difsolve_bench::{dataset, fixture};
use difsolve_core::adjoint::loss_and_gradient;
use difsolve_core::solver::{solve, SolverKind};
use difsolve_core::teacher::{teacher_solve, TeacherConfig};
use difsolve_core::trainer::train_s4s;

fn forward(c: &mut Criterion) {
    let mut g = c.benchmark_group("solve");
    for (kind, n) in [(SolverKind::Lms, 6), (SolverKind::Lms, 20), (SolverKind::Pc, 6), (SolverKind::Ss, 3)] {
        let f = fixture(kind, 3, n);
        let s = &f.config.problem.schedule;
        let m = &f.config.problem.model;
        g.bench_with_input(BenchmarkId::new(kind.to_string(), n), &f, |b, f| {
            b.iter(|| solve(&f.coeffs, s, &f.grid, m, black_box(&f.x_t)).unwrap())
        });
    }
    g.finish();
}

fn gradient(c: &mut Criterion) {
    let mut g = c.benchmark_group("loss_and_gradient");
    for n in [6, 20] {
        let f = fixture(SolverKind::Lms, 3, n);
        let s = &f.config.problem.schedule;
        let m = &f.config.problem.model;
        let target = vec![0.5; f.x_t.len()];
        let p = f.config.grid.learnable(&f.grid).unwrap();
        g.bench_function(BenchmarkId::new("lms", n), |b| {
            b.iter(|| loss_and_gradient(&f.coeffs, Some(&p), &f.grid, s, m, black_box(&f.x_t), &target).unwrap())
        });
    }
    g.finish();
}

fn teacher(c: &mut Criterion) {
    let f = fixture(SolverKind::Lms, 3, 6);
    let s = &f.config.problem.schedule;
    let m = &f.config.problem.model;
    let mut g = c.benchmark_group("teacher");
    for (name, cfg) in [
        ("adaptive-1e-8", TeacherConfig::adaptive(1e-8)),
        ("fine-400", TeacherConfig::fine(400)),
    ] {
        g.bench_function(name, |b| b.iter(|| teacher_solve(&cfg, s, m, black_box(&f.x_t)).unwrap()));
    }
    g.finish();
}

fn training_epoch(c: &mut Criterion) {
    let f = fixture(SolverKind::Lms, 3, 6);
    let data = dataset(256);
    let mut tc = f.config.train_config();
    tc.epochs = 1;
    let s = &f.config.problem.schedule;
    let m = &f.config.problem.model;
    c.bench_function("train_epoch_256", |b| {
        b.iter_batched(
            || data.clone(),
            |mut d| train_s4s(&mut d, &f.coeffs, &f.grid, s, m, &tc).unwrap(),
            BatchSize::LargeInput,
        )
    });
}

criterion_group!(benches, forward, gradient, teacher, training_epoch);
criterion_main!(benches);
