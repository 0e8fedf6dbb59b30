//! Generalized few-step solvers.
//!
//! Every update has the shape `x_i = A x_{i−1} + B Σ_j w_j D_j` where
//! `(A, B) = (α_i/α_{i−1}, −σ_i (e^{h_i} − 1))` and `D = ε` in noise form, or
//! `(σ_i/σ_{i−1}, −α_i (e^{−h_i} − 1))` and `D = x̂` in data form.

mod coeffs;
pub(crate) mod engine;
mod presets;
pub(crate) mod transfer;

pub use coeffs::{nfe, param_count, Prediction, SolverCoefficients, SolverKind};
pub use engine::{
    lms_step, pc_step, solve, ss_step, Evaluation, PcStep, SolveDiagnostics, SolveTrace, SsStep,
    StageTime, TimeRef,
};
pub use presets::{init_preset, Preset, PresetContext};
