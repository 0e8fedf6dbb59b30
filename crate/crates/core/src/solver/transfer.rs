//! The two scalars of the update `y = A x + B Σ_j w_j D_j` between times
//! `t_a > t_b`, with their time derivatives, and the model output `D` used by
//! each prediction form.

use crate::diffusion::NoiseSchedule;
use crate::error::Result;
use crate::score::NoisePredictor;

use super::coeffs::Prediction;

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Transfer {
    pub a: f64,
    pub b: f64,
    /// `(∂A/∂t_a, ∂A/∂t_b)`
    pub da: [f64; 2],
    /// `(∂B/∂t_a, ∂B/∂t_b)`
    pub db: [f64; 2],
}

/// Noise form: `A = α_b/α_a`, `B = −σ_b (e^h − 1)`.
/// Data form: `A = σ_b/σ_a`, `B = −α_b (e^{−h} − 1)`. In both `h = λ_b − λ_a`.
pub(crate) fn transfer(pred: Prediction, s: &NoiseSchedule, ta: f64, tb: f64) -> Transfer {
    let h = s.lambda(tb) - s.lambda(ta);
    let (dla, dlb) = (s.d_lambda(ta), s.d_lambda(tb));
    match pred {
        Prediction::Noise => {
            let a = (s.log_alpha(tb) - s.log_alpha(ta)).exp();
            let sb = s.sigma(tb);
            let e = h.exp();
            Transfer {
                a,
                b: -sb * h.exp_m1(),
                da: [-a * s.d_log_alpha(ta), a * s.d_log_alpha(tb)],
                db: [sb * e * dla, -s.d_sigma(tb) * h.exp_m1() - sb * e * dlb],
            }
        }
        Prediction::Data => {
            let (sa, sb) = (s.sigma(ta), s.sigma(tb));
            let a = sb / sa;
            let ab = s.alpha(tb);
            let e = (-h).exp();
            Transfer {
                a,
                b: -ab * (-h).exp_m1(),
                da: [-a * s.d_sigma(ta) / sa, s.d_sigma(tb) / sa],
                db: [-ab * e * dla, -s.d_alpha(tb) * (-h).exp_m1() + ab * e * dlb],
            }
        }
    }
}

/// Model output in the requested form: ε, or `x̂ = (z − σ ε)/α`.
pub(crate) fn model_output<M: NoisePredictor + ?Sized>(
    pred: Prediction,
    s: &NoiseSchedule,
    model: &M,
    z: &[f64],
    t: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let eps = model.epsilon(s, z, t)?;
    let d = match pred {
        Prediction::Noise => eps.clone(),
        Prediction::Data => crate::score::eps_to_data(s, z, &eps, t),
    };
    Ok((eps, d))
}

/// `y = A x + B Σ_j w_j D_j`.
pub(crate) fn combine(tr: &Transfer, x: &[f64], terms: &[(f64, &[f64])]) -> Vec<f64> {
    let mut y: Vec<f64> = x.iter().map(|v| tr.a * v).collect();
    for &(w, d) in terms {
        let c = tr.b * w;
        for (yi, di) in y.iter_mut().zip(d) {
            *yi += c * di;
        }
    }
    y
}
