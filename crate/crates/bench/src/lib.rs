//! Shared fixtures for the benchmarks in `benches/`.

use difsolve_core::discretization::TimeGrid;
use difsolve_core::harness::{ExperimentConfig, SolverSpec};
use difsolve_core::score::NoisePredictor;
use difsolve_core::solver::{Preset, SolverCoefficients, SolverKind};
use difsolve_core::teacher::{draw_noise, Dataset};

/// Default problem plus a solver of the given kind at `n` steps.
pub struct Fixture {
    pub config: ExperimentConfig,
    pub coeffs: SolverCoefficients,
    pub grid: TimeGrid,
    pub x_t: Vec<f64>,
}

pub fn fixture(kind: SolverKind, order: usize, n: usize) -> Fixture {
    let config = ExperimentConfig::default();
    let preset = match kind {
        SolverKind::Lms => Preset::Ipndm,
        SolverKind::Pc => Preset::UniPc,
        SolverKind::Ss => Preset::DpmSolverSingle,
    };
    let spec = SolverSpec { kind, order, preset, ..config.solver.clone() };
    let s = &config.problem.schedule;
    let grid = config.grid.build(s, n).expect("grid");
    let coeffs = spec.initialize(s, &grid, 0).expect("preset");
    let x_t = draw_noise(config.problem.model.dim(), s.sigma_tilde, 0, 0);
    Fixture { config, coeffs, grid, x_t }
}

/// Small dataset drawn with the default teacher.
pub fn dataset(train: usize) -> Dataset {
    let c = ExperimentConfig::default();
    Dataset::generate(&c.teacher, &c.problem.schedule, &c.problem.model, train, train / 4, 0).expect("dataset")
}
