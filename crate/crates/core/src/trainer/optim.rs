use serde::{Deserialize, Serialize};

use crate::vector::norm;

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Step-size multiplier over the course of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrDecay {
    Constant,
    /// `½(1 + cos(π t / T))` at update `t` of `T`.
    #[default]
    Cosine,
}

impl LrDecay {
    pub fn factor(self, t: usize, total: usize) -> f64 {
        match self {
            LrDecay::Constant => 1.0,
            LrDecay::Cosine if total == 0 => 1.0,
            LrDecay::Cosine => 0.5 * (1.0 + (std::f64::consts::PI * t as f64 / total as f64).cos()),
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Adam {
    cfg: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub(crate) fn new(cfg: AdamConfig, len: usize) -> Self {
        Self {
            cfg,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    /// One update with the step size scaled by `lr_scale`.
    pub(crate) fn step(&mut self, params: &mut [f64], grad: &[f64], lr_scale: f64) {
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let lr = lr * lr_scale;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        }
    }
}

/// Euclidean projection of `x_prime` onto the ball of radius `r·σ̃` around `x`.
pub fn project_ball(x_prime: &[f64], x: &[f64], r: f64, sigma_tilde: f64) -> Vec<f64> {
    let radius = r * sigma_tilde;
    let diff: Vec<f64> = x_prime.iter().zip(x).map(|(a, b)| a - b).collect();
    let dist = norm(&diff);
    if dist <= radius {
        return x_prime.to_vec();
    }
    if radius == 0.0 {
        return x.to_vec();
    }
    x.iter()
        .zip(&diff)
        .map(|(xi, d)| xi + radius * d / dist)
        .collect()
}
