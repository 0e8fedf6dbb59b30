//! Noise schedules, the λ (log-SNR) change of variables, φ-functions and the
//! exact-solution scaffolding shared by every solver.

pub mod exact;
pub mod phi;
pub mod quadrature;
pub mod schedule;

pub use exact::exact_step_integrand;
pub use phi::{phi_functions, PhiTable};
pub use schedule::{NoiseSchedule, OdeCoefficients, ScheduleKind};
