//! The φ-functions of exponential integrators,
//! `φ_k(z) = ∫_0^1 e^{(1−θ)z} θ^{k−1}/(k−1)! dθ`, with `φ_{k+1}(z) = (φ_k(z) − 1/k!)/z`.

use crate::error::{Error, Result};

/// Below this |h| the closed forms lose too many digits to cancellation.
pub const SERIES_THRESHOLD: f64 = 1e-4;
const SHORT_SERIES_TERMS: usize = 10;
/// Up to this |h| a convergent series beats upward recurrence.
const LONG_SERIES_LIMIT: f64 = 2.0;

#[derive(Debug, Clone, PartialEq)]
pub struct PhiTable {
    pub h: f64,
    /// `values[k-1] = φ_k(h)`.
    pub values: Vec<f64>,
}

impl PhiTable {
    pub fn order(&self) -> usize {
        self.values.len()
    }

    /// φ_k(h), 1-based.
    pub fn get(&self, k: usize) -> f64 {
        self.values[k - 1]
    }
}

pub fn phi_functions(h: f64, order: usize) -> Result<PhiTable> {
    if order < 1 {
        return Err(Error::Argument("phi order must be at least 1".into()));
    }
    if !h.is_finite() {
        return Err(Error::NonFiniteInput("phi_functions"));
    }
    Ok(PhiTable {
        h,
        values: phi_values(h, order),
    })
}

pub(crate) fn inv_factorial(n: usize) -> f64 {
    (1..=n).fold(1.0, |acc, k| acc / k as f64)
}

fn series(h: f64, k: usize, terms: usize) -> f64 {
    // Σ_n h^n / (n+k)!, summed from the small end.
    let mut coeffs = Vec::with_capacity(terms);
    let mut c = inv_factorial(k);
    for n in 0..terms {
        coeffs.push(c);
        c *= h / (n + k + 1) as f64;
    }
    coeffs.iter().rev().fold(0.0, |acc, &c| acc + c)
}

fn long_series(h: f64, k: usize) -> f64 {
    let mut terms = Vec::with_capacity(48);
    let mut term = inv_factorial(k);
    let mut n = 0usize;
    loop {
        terms.push(term);
        n += 1;
        term *= h / (n + k) as f64;
        if term.abs() <= 1e-20 * terms[0] || n > 80 {
            break;
        }
    }
    terms.iter().rev().fold(0.0, |acc, &c| acc + c)
}

pub(crate) fn phi_values(h: f64, order: usize) -> Vec<f64> {
    if h == 0.0 {
        return (1..=order).map(inv_factorial).collect();
    }
    if h.abs() < SERIES_THRESHOLD {
        return phi_series(h, order);
    }
    if h.abs() < LONG_SERIES_LIMIT {
        let mut out: Vec<f64> = vec![h.exp_m1() / h];
        out.extend((2..=order).map(|k| long_series(h, k)));
        return out;
    }
    phi_closed_form(h, order)
}

/// Closed-form evaluation by upward recurrence from `φ_1 = (e^h − 1)/h`.
/// Loses digits to cancellation as |h| → 0.
pub fn phi_closed_form(h: f64, order: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(order);
    out.push(h.exp_m1() / h);
    for k in 1..order {
        let prev = out[k - 1];
        out.push((prev - inv_factorial(k)) / h);
    }
    out
}

/// Truncated Taylor series of φ_1..φ_order (the small-|h| branch).
pub fn phi_series(h: f64, order: usize) -> Vec<f64> {
    (1..=order)
        .map(|k| series(h, k, SHORT_SERIES_TERMS))
        .collect()
}

/// `∫_0^h e^{sign·(h−s)} s^n ds` for n = 0..=n_max, via
/// `n! h^{n+1} φ_{n+1}(sign·h)`.
#[cfg(test)]
pub(crate) fn exp_weighted_moments(h: f64, sign: f64, n_max: usize) -> Vec<f64> {
    let phis = phi_values(sign * h, n_max + 1);
    let mut out = Vec::with_capacity(n_max + 1);
    let mut fact = 1.0;
    let mut hp = h;
    for (n, phi) in phis.iter().enumerate() {
        if n > 0 {
            fact *= n as f64;
            hp *= h;
        }
        out.push(fact * hp * phi);
    }
    out
}
