//! Analytic noise-prediction models.
//!
//! A Gaussian mixture `Σ_j w_j N(μ_j, s_j² I)` pushed through the transition
//! kernel `N(α_t x_0, σ_t² I)` stays a Gaussian mixture, so its exact score
//! and therefore the ideal `ε(x, t) = −σ_t ∇ log p_t(x)` are closed form.

use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::vector::{all_finite, dot};

/// Output of a vector–Jacobian product through ε.
#[derive(Debug, Clone, PartialEq)]
pub struct VjpOutput {
    /// ε(x, t), recomputed (rematerialized) as part of the product.
    pub value: Vec<f64>,
    /// `(∂ε/∂x)ᵀ c`
    pub grad_x: Vec<f64>,
    /// `c · ∂ε/∂t`
    pub grad_t: f64,
}

/// A noise-prediction function ε(x, t) with reverse-mode derivatives.
pub trait NoisePredictor: Send + Sync {
    fn dim(&self) -> usize;

    fn epsilon(&self, schedule: &NoiseSchedule, x: &[f64], t: f64) -> Result<Vec<f64>>;

    fn epsilon_vjp(
        &self,
        schedule: &NoiseSchedule,
        x: &[f64],
        t: f64,
        cotangent: &[f64],
    ) -> Result<VjpOutput>;

    /// Closed-form solution of the diffusion ODE from `t_from` to `t_to`,
    /// when the model admits one.
    fn exact_flow(
        &self,
        _schedule: &NoiseSchedule,
        _x: &[f64],
        _t_from: f64,
        _t_to: f64,
    ) -> Option<Vec<f64>> {
        None
    }
}

impl<M: NoisePredictor + ?Sized> NoisePredictor for &M {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn epsilon(&self, schedule: &NoiseSchedule, x: &[f64], t: f64) -> Result<Vec<f64>> {
        (**self).epsilon(schedule, x, t)
    }

    fn epsilon_vjp(
        &self,
        schedule: &NoiseSchedule,
        x: &[f64],
        t: f64,
        cotangent: &[f64],
    ) -> Result<VjpOutput> {
        (**self).epsilon_vjp(schedule, x, t, cotangent)
    }

    fn exact_flow(&self, schedule: &NoiseSchedule, x: &[f64], t_from: f64, t_to: f64) -> Option<Vec<f64>> {
        (**self).exact_flow(schedule, x, t_from, t_to)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreModelKind {
    IsotropicGaussian,
    GaussianMixture,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    /// Per-component isotropic variance s².
    pub scale_sq: f64,
}

/// Gaussian-mixture data distribution with isotropic components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianMixture {
    pub kind: ScoreModelKind,
    pub components: Vec<MixtureComponent>,
}

struct Terms {
    resp: Vec<f64>,
    /// `(x − α μ_j)`
    diff: Vec<Vec<f64>>,
    var: Vec<f64>,
    /// `u_j = (x − α μ_j) / v_j`
    u: Vec<Vec<f64>>,
    /// `Σ_j r_j u_j`
    u_bar: Vec<f64>,
}

impl GaussianMixture {
    pub fn new(components: Vec<MixtureComponent>) -> Result<Self> {
        let kind = if components.len() == 1 {
            ScoreModelKind::IsotropicGaussian
        } else {
            ScoreModelKind::GaussianMixture
        };
        let m = Self { kind, components };
        m.validate()?;
        Ok(m)
    }

    /// `N(mean, s² I)`.
    pub fn isotropic(mean: Vec<f64>, scale_sq: f64) -> Result<Self> {
        Self::new(vec![MixtureComponent {
            weight: 1.0,
            mean,
            scale_sq,
        }])
    }

    /// The default 2-D benchmark: three well-separated, fairly tight modes.
    pub fn default_toy() -> Self {
        let c = |weight: f64, mean: [f64; 2]| MixtureComponent {
            weight,
            mean: mean.to_vec(),
            scale_sq: 0.04,
        };
        Self::new(vec![
            c(0.3, [-1.5, -0.8]),
            c(0.45, [1.5, -0.6]),
            c(0.25, [0.0, 1.6]),
        ])
        .expect("static toy mixture is valid")
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .components
            .first()
            .ok_or_else(|| Error::Argument("mixture needs at least one component".into()))?;
        let d = first.mean.len();
        if d == 0 {
            return Err(Error::Argument("state dimension must be at least 1".into()));
        }
        let mut total = 0.0;
        for (j, c) in self.components.iter().enumerate() {
            if c.mean.len() != d {
                return Err(Error::Argument(format!(
                    "component {j} has dimension {}, expected {d}",
                    c.mean.len()
                )));
            }
            if !(c.weight >= 0.0 && c.weight.is_finite()) {
                return Err(Error::Argument(format!("component {j} has invalid weight")));
            }
            if !(c.scale_sq > 0.0 && c.scale_sq.is_finite()) || !all_finite(&c.mean) {
                return Err(Error::Argument(format!(
                    "component {j} needs finite mean and positive scale"
                )));
            }
            total += c.weight;
        }
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Argument(format!(
                "mixture weights sum to {total}, expected 1"
            )));
        }
        let expect_kind = if self.components.len() == 1 {
            ScoreModelKind::IsotropicGaussian
        } else {
            ScoreModelKind::GaussianMixture
        };
        if self.kind == ScoreModelKind::IsotropicGaussian && expect_kind != self.kind {
            return Err(Error::Argument(
                "isotropic-gaussian model must have exactly one component".into(),
            ));
        }
        Ok(())
    }

    /// The single component when this is an isotropic Gaussian.
    pub fn as_single_gaussian(&self) -> Option<&MixtureComponent> {
        match self.components.as_slice() {
            [only] => Some(only),
            _ => None,
        }
    }

    fn check_inputs(&self, schedule: &NoiseSchedule, x: &[f64], t: f64) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::Argument(format!(
                "state has dimension {}, model expects {}",
                x.len(),
                self.dim()
            )));
        }
        if !all_finite(x) || !t.is_finite() {
            return Err(Error::NonFiniteInput("epsilon"));
        }
        schedule.check_time(t)
    }

    fn terms(&self, alpha: f64, sigma: f64, x: &[f64]) -> Terms {
        let d = x.len() as f64;
        let k = self.components.len();
        let mut log_w = Vec::with_capacity(k);
        let mut diff = Vec::with_capacity(k);
        let mut var = Vec::with_capacity(k);
        for c in &self.components {
            let v = alpha * alpha * c.scale_sq + sigma * sigma;
            let dj: Vec<f64> = x.iter().zip(&c.mean).map(|(xi, mi)| xi - alpha * mi).collect();
            let l = c.weight.ln()
                - 0.5 * d * (2.0 * std::f64::consts::PI * v).ln()
                - dot(&dj, &dj) / (2.0 * v);
            log_w.push(l);
            diff.push(dj);
            var.push(v);
        }
        let resp = softmax(&log_w);
        let u: Vec<Vec<f64>> = diff
            .iter()
            .zip(&var)
            .map(|(dj, v)| dj.iter().map(|e| e / v).collect())
            .collect();
        let mut u_bar = vec![0.0; x.len()];
        for (r, uj) in resp.iter().zip(&u) {
            for (b, e) in u_bar.iter_mut().zip(uj) {
                *b += r * e;
            }
        }
        Terms {
            resp,
            diff,
            var,
            u,
            u_bar,
        }
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits
        .iter()
        .map(|l| if m.is_finite() { (l - m).exp() } else { 0.0 })
        .collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

impl NoisePredictor for GaussianMixture {
    fn dim(&self) -> usize {
        self.components[0].mean.len()
    }

    /// A single Gaussian stays Gaussian, `p_t = N(α_t μ, (α_t² s² + σ_t²) I)`,
    /// and the flow is the affine map between standardized coordinates.
    fn exact_flow(&self, schedule: &NoiseSchedule, x: &[f64], t_from: f64, t_to: f64) -> Option<Vec<f64>> {
        let c = self.as_single_gaussian()?;
        let spread = |t: f64| (schedule.alpha(t).powi(2) * c.scale_sq + schedule.sigma(t).powi(2)).sqrt();
        let (a0, a1) = (schedule.alpha(t_from), schedule.alpha(t_to));
        let r = spread(t_to) / spread(t_from);
        Some(x.iter().zip(&c.mean).map(|(xi, m)| a1 * m + r * (xi - a0 * m)).collect())
    }

    fn epsilon(&self, schedule: &NoiseSchedule, x: &[f64], t: f64) -> Result<Vec<f64>> {
        self.check_inputs(schedule, x, t)?;
        let sigma = schedule.sigma(t);
        let terms = self.terms(schedule.alpha(t), sigma, x);
        Ok(terms.u_bar.iter().map(|v| sigma * v).collect())
    }

    fn epsilon_vjp(
        &self,
        schedule: &NoiseSchedule,
        x: &[f64],
        t: f64,
        cotangent: &[f64],
    ) -> Result<VjpOutput> {
        self.check_inputs(schedule, x, t)?;
        if cotangent.len() != x.len() {
            return Err(Error::Argument("cotangent shape mismatch".into()));
        }
        let (alpha, sigma) = (schedule.alpha(t), schedule.sigma(t));
        let (d_alpha, d_sigma) = (schedule.d_alpha(t), schedule.d_sigma(t));
        let Terms {
            resp,
            diff,
            var,
            u,
            u_bar,
        } = self.terms(alpha, sigma, x);
        let dim = x.len() as f64;

        // J = σ [ (Σ r_j / v_j) I − Σ r_j u_j u_jᵀ + ū ūᵀ ], symmetric.
        let mean_prec: f64 = resp.iter().zip(&var).map(|(r, v)| r / v).sum();
        let mut grad_x: Vec<f64> = cotangent.iter().map(|c| mean_prec * c).collect();
        for (r, uj) in resp.iter().zip(&u) {
            let w = r * dot(uj, cotangent);
            for (g, e) in grad_x.iter_mut().zip(uj) {
                *g -= w * e;
            }
        }
        let ub_c = dot(&u_bar, cotangent);
        for (g, e) in grad_x.iter_mut().zip(&u_bar) {
            *g = sigma * (*g + ub_c * e);
        }

        // ∂ε/∂t through α_t and σ_t.
        let mut dl = Vec::with_capacity(resp.len());
        let mut dv = Vec::with_capacity(resp.len());
        for (j, c) in self.components.iter().enumerate() {
            let v = var[j];
            let v_dot = 2.0 * alpha * d_alpha * c.scale_sq + 2.0 * sigma * d_sigma;
            let sq = dot(&diff[j], &diff[j]);
            let l_dot = -0.5 * dim * v_dot / v
                + d_alpha * dot(&diff[j], &c.mean) / v
                + sq * v_dot / (2.0 * v * v);
            dl.push(l_dot);
            dv.push(v_dot);
        }
        let dl_bar: f64 = resp.iter().zip(&dl).map(|(r, l)| r * l).sum();
        let mut du_bar = vec![0.0; x.len()];
        for (j, c) in self.components.iter().enumerate() {
            let dr = resp[j] * (dl[j] - dl_bar);
            let v = var[j];
            for i in 0..x.len() {
                let du = -d_alpha * c.mean[i] / v - diff[j][i] * dv[j] / (v * v);
                du_bar[i] += dr * u[j][i] + resp[j] * du;
            }
        }
        let grad_t: f64 = cotangent
            .iter()
            .zip(u_bar.iter().zip(&du_bar))
            .map(|(c, (ub, dub))| c * (d_sigma * ub + sigma * dub))
            .sum();

        Ok(VjpOutput {
            value: u_bar.iter().map(|v| sigma * v).collect(),
            grad_x,
            grad_t,
        })
    }
}

/// View of a noise predictor as a data predictor,
/// `x̂(x, t) = (x − σ_t ε(x, t)) / α_t`.
pub struct DataPredictionView<'a, M: ?Sized> {
    pub model: &'a M,
    pub schedule: &'a NoiseSchedule,
}

impl<'a, M: NoisePredictor + ?Sized> DataPredictionView<'a, M> {
    pub fn new(model: &'a M, schedule: &'a NoiseSchedule) -> Self {
        Self { model, schedule }
    }

    pub fn x_hat(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        let eps = self.model.epsilon(self.schedule, x, t)?;
        Ok(eps_to_data(self.schedule, x, &eps, t))
    }

    /// Inverse map back to a noise prediction.
    pub fn epsilon_from(&self, x: &[f64], x_hat: &[f64], t: f64) -> Vec<f64> {
        let (a, s) = (self.schedule.alpha(t), self.schedule.sigma(t));
        x.iter().zip(x_hat).map(|(xi, di)| (xi - a * di) / s).collect()
    }
}

pub(crate) fn eps_to_data(schedule: &NoiseSchedule, x: &[f64], eps: &[f64], t: f64) -> Vec<f64> {
    let (a, s) = (schedule.alpha(t), schedule.sigma(t));
    x.iter().zip(eps).map(|(xi, ei)| (xi - s * ei) / a).collect()
}

/// ε ≡ 0.
#[derive(Debug, Clone, Copy)]
pub struct ZeroScore {
    pub dim: usize,
}

impl NoisePredictor for ZeroScore {
    fn dim(&self) -> usize {
        self.dim
    }

    fn epsilon(&self, schedule: &NoiseSchedule, x: &[f64], t: f64) -> Result<Vec<f64>> {
        schedule.check_time(t)?;
        Ok(vec![0.0; x.len()])
    }

    fn epsilon_vjp(
        &self,
        schedule: &NoiseSchedule,
        x: &[f64],
        t: f64,
        _cotangent: &[f64],
    ) -> Result<VjpOutput> {
        schedule.check_time(t)?;
        Ok(VjpOutput {
            value: vec![0.0; x.len()],
            grad_x: vec![0.0; x.len()],
            grad_t: 0.0,
        })
    }

    fn exact_flow(&self, schedule: &NoiseSchedule, x: &[f64], t_from: f64, t_to: f64) -> Option<Vec<f64>> {
        let r = schedule.alpha(t_to) / schedule.alpha(t_from);
        Some(x.iter().map(|v| r * v).collect())
    }
}

/// ε ≡ c, independent of x and t.
#[derive(Debug, Clone)]
pub struct ConstantScore {
    pub value: Vec<f64>,
}

impl NoisePredictor for ConstantScore {
    fn dim(&self) -> usize {
        self.value.len()
    }

    fn epsilon(&self, schedule: &NoiseSchedule, _x: &[f64], t: f64) -> Result<Vec<f64>> {
        schedule.check_time(t)?;
        Ok(self.value.clone())
    }

    fn epsilon_vjp(
        &self,
        schedule: &NoiseSchedule,
        x: &[f64],
        t: f64,
        _cotangent: &[f64],
    ) -> Result<VjpOutput> {
        schedule.check_time(t)?;
        Ok(VjpOutput {
            value: self.value.clone(),
            grad_x: vec![0.0; x.len()],
            grad_t: 0.0,
        })
    }
}

/// Wraps a model and counts forward and VJP evaluations.
pub struct CountingModel<M> {
    inner: M,
    forward: AtomicUsize,
    vjp: AtomicUsize,
}

impl<M> CountingModel<M> {
    pub fn new(inner: M) -> Self {
        Self {
            inner,
            forward: AtomicUsize::new(0),
            vjp: AtomicUsize::new(0),
        }
    }

    pub fn forward_calls(&self) -> usize {
        self.forward.load(Ordering::Relaxed)
    }

    pub fn vjp_calls(&self) -> usize {
        self.vjp.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.forward.store(0, Ordering::Relaxed);
        self.vjp.store(0, Ordering::Relaxed);
    }

    pub fn inner(&self) -> &M {
        &self.inner
    }
}

impl<M: NoisePredictor> NoisePredictor for CountingModel<M> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn epsilon(&self, schedule: &NoiseSchedule, x: &[f64], t: f64) -> Result<Vec<f64>> {
        self.forward.fetch_add(1, Ordering::Relaxed);
        self.inner.epsilon(schedule, x, t)
    }

    fn epsilon_vjp(
        &self,
        schedule: &NoiseSchedule,
        x: &[f64],
        t: f64,
        cotangent: &[f64],
    ) -> Result<VjpOutput> {
        self.vjp.fetch_add(1, Ordering::Relaxed);
        self.inner.epsilon_vjp(schedule, x, t, cotangent)
    }

    fn exact_flow(&self, schedule: &NoiseSchedule, x: &[f64], t_from: f64, t_to: f64) -> Option<Vec<f64>> {
        self.inner.exact_flow(schedule, x, t_from, t_to)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_mixture(rng: &mut ChaCha8Rng, d: usize, k: usize) -> GaussianMixture {
        let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let mut comps: Vec<MixtureComponent> = raw
            .iter()
            .map(|w| MixtureComponent {
                weight: w / total,
                mean: (0..d).map(|_| rng.random_range(-2.0..2.0)).collect(),
                scale_sq: rng.random_range(0.05..1.0),
            })
            .collect();
        // Exact normalization so validation passes regardless of rounding.
        let s: f64 = comps.iter().map(|c| c.weight).sum();
        comps[0].weight += 1.0 - s;
        GaussianMixture::new(comps).unwrap()
    }

    #[test]
    fn isotropic_gaussian_examples() {
        let s = NoiseSchedule::ve(10.0);
        let m = GaussianMixture::isotropic(vec![0.0], 1.0).unwrap();
        assert_eq!(m.epsilon(&s, &[0.0], 1.0).unwrap(), vec![0.0]);
        // α = 1, σ = 1: σ x / (α² s² + σ²) = 2 / 2.
        let e = m.epsilon(&s, &[2.0], 1.0).unwrap();
        assert!((e[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn single_component_mixture_is_isotropic() {
        let s = NoiseSchedule::vp_linear();
        let m = GaussianMixture::isotropic(vec![0.0, 0.0], 0.5).unwrap();
        let x = [0.3, -1.2];
        let t = 0.4;
        let (a, sg) = (s.alpha(t), s.sigma(t));
        let e = m.epsilon(&s, &x, t).unwrap();
        for i in 0..2 {
            let expect = sg * x[i] / (a * a * 0.5 + sg * sg);
            assert!((e[i] - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn matches_direct_density_score() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let s = NoiseSchedule::vp_linear();
        for _ in 0..20 {
            let m = random_mixture(&mut rng, 3, 4);
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let t = rng.random_range(0.05..1.0);
            let (a, sg) = (s.alpha(t), s.sigma(t));
            // ∇ log p = (Σ w_j N_j ∇log N_j) / (Σ w_j N_j), no log-sum-exp.
            let mut p = 0.0;
            let mut grad = [0.0; 3];
            for c in &m.components {
                let v = a * a * c.scale_sq + sg * sg;
                let sq: f64 = (0..3).map(|i| (x[i] - a * c.mean[i]).powi(2)).sum();
                let dens = c.weight * (2.0 * std::f64::consts::PI * v).powf(-1.5)
                    * (-sq / (2.0 * v)).exp();
                p += dens;
                for i in 0..3 {
                    grad[i] += dens * (-(x[i] - a * c.mean[i]) / v);
                }
            }
            let e = m.epsilon(&s, &x, t).unwrap();
            for i in 0..3 {
                let expect = -sg * grad[i] / p;
                assert!((e[i] - expect).abs() < 1e-10 * expect.abs().max(1.0));
            }
        }
    }

    #[test]
    fn vjp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let schedules = [NoiseSchedule::vp_linear(), NoiseSchedule::edm()];
        for draw in 0..100 {
            let sched = &schedules[draw % 2];
            let m = random_mixture(&mut rng, 2, 3);
            let x: Vec<f64> = (0..2).map(|_| rng.random_range(-2.0..2.0)).collect();
            let c: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
            let u: f64 = rng.random_range(0.05..0.95);
            let t = sched.t_min + u * (sched.t_max - sched.t_min);
            let out = m.epsilon_vjp(sched, &x, t, &c).unwrap();
            let h = 1e-5;
            let proj = |x: &[f64], t: f64| dot(&m.epsilon(sched, x, t).unwrap(), &c);
            let mut fd = vec![0.0; 2];
            for i in 0..2 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[i] += h;
                xm[i] -= h;
                fd[i] = (proj(&xp, t) - proj(&xm, t)) / (2.0 * h);
            }
            let scale = fd.iter().fold(1e-8f64, |m, v| m.max(v.abs()));
            for i in 0..2 {
                assert!(
                    (out.grad_x[i] - fd[i]).abs() <= 1e-5 * scale,
                    "draw {draw}: {:?} vs {:?}",
                    out.grad_x,
                    fd
                );
            }
            let ht = 1e-5 * t;
            let fdt = (proj(&x, t + ht) - proj(&x, t - ht)) / (2.0 * ht);
            assert!(
                (out.grad_t - fdt).abs() <= 1e-5 * fdt.abs().max(1e-6),
                "draw {draw}: {} vs {}",
                out.grad_t,
                fdt
            );
            assert_eq!(out.value, m.epsilon(sched, &x, t).unwrap());
        }
    }

    #[test]
    fn isotropic_jacobian_is_scalar() {
        let s = NoiseSchedule::vp_linear();
        let m = GaussianMixture::isotropic(vec![0.0, 0.0], 0.5).unwrap();
        let t = 0.3;
        let (a, sg) = (s.alpha(t), s.sigma(t));
        let k = sg / (a * a * 0.5 + sg * sg);
        let out = m.epsilon_vjp(&s, &[0.4, 0.1], t, &[1.0, -2.0]).unwrap();
        assert!((out.grad_x[0] - k).abs() < 1e-14);
        assert!((out.grad_x[1] + 2.0 * k).abs() < 1e-14);
        let zero = m.epsilon_vjp(&s, &[0.4, 0.1], t, &[0.0, 0.0]).unwrap();
        assert_eq!(zero.grad_x, vec![0.0, 0.0]);
        assert_eq!(zero.grad_t, 0.0);
    }

    #[test]
    fn data_prediction_round_trip() {
        let s = NoiseSchedule::vp_linear();
        let m = GaussianMixture::default_toy();
        let view = DataPredictionView::new(&m, &s);
        let x = [0.7, -0.2];
        for &t in &[0.01, 0.3, 0.99] {
            let eps = m.epsilon(&s, &x, t).unwrap();
            let xh = view.x_hat(&x, t).unwrap();
            let back = view.epsilon_from(&x, &xh, t);
            for i in 0..2 {
                assert!((back[i] - eps[i]).abs() < 1e-12 * eps[i].abs().max(1.0));
            }
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let s = NoiseSchedule::vp_linear();
        let m = GaussianMixture::default_toy();
        assert!(matches!(
            m.epsilon(&s, &[f64::NAN, 0.0], 0.5),
            Err(Error::NonFiniteInput(_))
        ));
        assert!(m.epsilon(&s, &[0.0], 0.5).is_err());
        assert!(m.epsilon(&s, &[0.0, 0.0], 2.0).is_err());
        let bad = GaussianMixture::new(vec![MixtureComponent {
            weight: 0.5,
            mean: vec![0.0],
            scale_sq: 1.0,
        }]);
        assert!(bad.is_err());
    }

    #[test]
    fn far_from_modes_stays_finite() {
        // Responsibilities underflow without log-sum-exp here.
        let s = NoiseSchedule::vp_linear();
        let m = GaussianMixture::default_toy();
        let e = m.epsilon(&s, &[40.0, -35.0], s.t_min).unwrap();
        assert!(all_finite(&e));
    }

    #[test]
    fn counting_wrapper_counts() {
        let s = NoiseSchedule::vp_linear();
        let m = CountingModel::new(GaussianMixture::default_toy());
        m.epsilon(&s, &[0.0, 0.0], 0.5).unwrap();
        m.epsilon_vjp(&s, &[0.0, 0.0], 0.5, &[1.0, 0.0]).unwrap();
        assert_eq!((m.forward_calls(), m.vjp_calls()), (1, 1));
    }
}
