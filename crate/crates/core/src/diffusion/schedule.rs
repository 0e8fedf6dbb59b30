use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of the forward noising process.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ScheduleKind {
    /// Variance preserving with β(t) linear from `beta_min` at t = 0 to
    /// `beta_max` at t = T.
    VpLinear { beta_min: f64, beta_max: f64 },
    /// Variance exploding, α ≡ 1 and σ_t = t.
    Ve,
    /// EDM parametrization: α ≡ 1, σ_t = t, with EDM's default time range.
    Edm,
}

/// A continuous-time noise schedule `x_t = α_t x_0 + σ_t z` on `[t_min, T]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    /// Terminal time T.
    pub t_max: f64,
    /// Solve-to time; the ODE is integrated down to here rather than 0.
    pub t_min: f64,
    /// Scale of the terminal noise distribution N(0, σ̃² I).
    pub sigma_tilde: f64,
}

/// Drift `f(t)` and squared diffusion `g²(t)` of the forward SDE.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OdeCoefficients {
    pub f_t: f64,
    pub g_sq_t: f64,
}

const BISECTION_ITERS: usize = 50;
const NEWTON_POLISH: usize = 3;

impl NoiseSchedule {
    pub fn new(kind: ScheduleKind, t_max: f64, t_min: f64, sigma_tilde: f64) -> Result<Self> {
        let s = Self {
            kind,
            t_max,
            t_min,
            sigma_tilde,
        };
        s.validate()?;
        Ok(s)
    }

    /// β ∈ [0.1, 20] on t ∈ [0, 1], solved down to t = 1e-3.
    pub fn vp_linear() -> Self {
        Self {
            kind: ScheduleKind::VpLinear {
                beta_min: 0.1,
                beta_max: 20.0,
            },
            t_max: 1.0,
            t_min: 1e-3,
            sigma_tilde: 1.0,
        }
    }

    pub fn ve(t_max: f64) -> Self {
        Self {
            kind: ScheduleKind::Ve,
            t_max,
            t_min: 1e-3 * t_max,
            sigma_tilde: t_max,
        }
    }

    /// σ ∈ [0.002, 80], the EDM default range.
    pub fn edm() -> Self {
        Self {
            kind: ScheduleKind::Edm,
            t_max: 80.0,
            t_min: 0.002,
            sigma_tilde: 80.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.t_max, self.t_min, self.sigma_tilde]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.t_max <= 0.0 || self.t_min <= 0.0 || self.t_min >= self.t_max {
            return Err(Error::Argument(format!(
                "schedule needs 0 < t_min < T, got t_min = {}, T = {}",
                self.t_min, self.t_max
            )));
        }
        if self.sigma_tilde <= 0.0 {
            return Err(Error::Argument("sigma_tilde must be positive".into()));
        }
        if let ScheduleKind::VpLinear { beta_min, beta_max } = self.kind {
            if !(beta_min > 0.0 && beta_max >= beta_min && beta_max.is_finite()) {
                return Err(Error::Argument(format!(
                    "VP schedule needs 0 < beta_min <= beta_max, got {beta_min}, {beta_max}"
                )));
            }
        }
        Ok(())
    }

    pub fn log_alpha(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::VpLinear { beta_min, beta_max } => {
                -0.5 * (beta_min * t + (beta_max - beta_min) * t * t / (2.0 * self.t_max))
            }
            ScheduleKind::Ve | ScheduleKind::Edm => 0.0,
        }
    }

    /// `d log α_t / dt`, which is also the drift coefficient f(t).
    pub fn d_log_alpha(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::VpLinear { beta_min, beta_max } => {
                -0.5 * (beta_min + (beta_max - beta_min) * t / self.t_max)
            }
            ScheduleKind::Ve | ScheduleKind::Edm => 0.0,
        }
    }

    pub fn alpha(&self, t: f64) -> f64 {
        self.log_alpha(t).exp()
    }

    pub fn sigma(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::VpLinear { .. } => (-(2.0 * self.log_alpha(t)).exp_m1()).sqrt(),
            ScheduleKind::Ve | ScheduleKind::Edm => t,
        }
    }

    pub fn d_alpha(&self, t: f64) -> f64 {
        self.alpha(t) * self.d_log_alpha(t)
    }

    pub fn d_sigma(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::VpLinear { .. } => {
                let a = self.alpha(t);
                -a * a * self.d_log_alpha(t) / self.sigma(t)
            }
            ScheduleKind::Ve | ScheduleKind::Edm => 1.0,
        }
    }

    /// Log signal-to-noise ratio λ_t = log(α_t / σ_t).
    pub fn lambda(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::VpLinear { .. } => {
                let la = self.log_alpha(t);
                la - 0.5 * (-(2.0 * la).exp_m1()).ln()
            }
            ScheduleKind::Ve | ScheduleKind::Edm => -t.ln(),
        }
    }

    pub fn d_lambda(&self, t: f64) -> f64 {
        self.d_log_alpha(t) - self.d_sigma(t) / self.sigma(t)
    }

    pub fn ode_coefficients(&self, t: f64) -> OdeCoefficients {
        let f = self.d_log_alpha(t);
        let s = self.sigma(t);
        OdeCoefficients {
            f_t: f,
            g_sq_t: 2.0 * s * self.d_sigma(t) - 2.0 * f * s * s,
        }
    }

    pub fn contains(&self, t: f64) -> bool {
        let slack = 1e-12 * self.t_max;
        t >= self.t_min - slack && t <= self.t_max + slack
    }

    pub fn check_time(&self, t: f64) -> Result<()> {
        if self.contains(t) {
            Ok(())
        } else {
            Err(Error::Domain {
                what: "t",
                value: t,
                lo: self.t_min,
                hi: self.t_max,
            })
        }
    }

    /// `(α_t, σ_t, λ_t)` at a time inside `[t_min, T]`.
    pub fn alpha_sigma_lambda(&self, t: f64) -> Result<(f64, f64, f64)> {
        self.check_time(t)?;
        Ok((self.alpha(t), self.sigma(t), self.lambda(t)))
    }

    /// `(λ_T, λ_{t_min})`; λ decreases in t so the first entry is the smaller.
    pub fn lambda_range(&self) -> (f64, f64) {
        (self.lambda(self.t_max), self.lambda(self.t_min))
    }

    /// Inverse of `t ↦ λ_t` on `[t_min, T]`.
    ///
    /// Bisection (shared by every schedule kind) followed by a few
    /// bracketed Newton steps to remove the last bits of bisection error.
    pub fn time_from_lambda(&self, lambda: f64) -> Result<f64> {
        let (lam_lo, lam_hi) = self.lambda_range();
        let slack = 1e-12 * (1.0 + lam_lo.abs().max(lam_hi.abs()));
        if !(lambda >= lam_lo - slack && lambda <= lam_hi + slack) {
            return Err(Error::Domain {
                what: "lambda",
                value: lambda,
                lo: lam_lo,
                hi: lam_hi,
            });
        }
        if lambda <= lam_lo {
            return Ok(self.t_max);
        }
        if lambda >= lam_hi {
            return Ok(self.t_min);
        }
        // λ(lo) > target > λ(hi)
        let (mut lo, mut hi) = (self.t_min, self.t_max);
        for _ in 0..BISECTION_ITERS {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.lambda(mid) > lambda {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let mut t = 0.5 * (lo + hi);
        for _ in 0..NEWTON_POLISH {
            let r = self.lambda(t) - lambda;
            if r == 0.0 {
                break;
            }
            let next = t - r / self.d_lambda(t);
            if !(next > lo && next < hi) {
                break;
            }
            t = next;
        }
        Ok(t)
    }

    /// `t_κ`: inverse of κ_t = σ_t / α_t = exp(−λ_t).
    pub fn time_from_kappa(&self, kappa: f64) -> Result<f64> {
        if kappa <= 0.0 {
            return Err(Error::Argument(format!("kappa must be positive, got {kappa}")));
        }
        self.time_from_lambda(-kappa.ln())
    }

    pub fn kappa(&self, t: f64) -> f64 {
        (-self.lambda(t)).exp()
    }
}
