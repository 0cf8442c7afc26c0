//! Proximity operators of `g*_λ(q) = (N/λ) Σ_k exp(λ(q_k − c_k) − 1)` and of its
//! conjugate `g_λ(r) = ⟨r, c + log(r/N)/λ⟩` (for `r ≥ 0`).
//!
//! The prox of `τ g*_λ` is separable and closed-form through Lambert W:
//! `q_k = p_k − W(λτN exp(λ(p_k − c_k) − 1)) / λ`.

use super::lambert::{lambert_w, lambert_w_of_exp, LAMBERT_TOL};
use crate::error::{Error, Result};

/// Exponents above this value are handled without forming the exponential.
pub const EXP_CLAMP: f64 = 700.0;

/// Output of a prox evaluation plus the number of entries that took the
/// clamped (log-argument) path.
#[derive(Debug, Clone, PartialEq)]
pub struct ProxOutput {
    pub values: Vec<f64>,
    pub clamped: usize,
}

fn check(tau: f64, lambda: f64, n: f64, len: usize, c_len: usize) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::invalid(format!("prox step must be positive, got {tau}")));
    }
    if !(lambda > 0.0 && lambda.is_finite()) || !(n > 0.0) {
        return Err(Error::invalid("prox needs positive lambda and N"));
    }
    if len != c_len {
        return Err(Error::dims(format!("prox input of length {len} for cost of length {c_len}")));
    }
    Ok(())
}

/// `W(exp(log_z))`, choosing the log path above the clamp. Returns whether the
/// clamp path was taken.
#[inline]
fn w_of_log(log_z: f64) -> (f64, bool) {
    if log_z > EXP_CLAMP {
        (lambert_w_of_exp(log_z), true)
    } else {
        (lambert_w(log_z.exp(), LAMBERT_TOL).unwrap_or(0.0), false)
    }
}

/// `prox_{τ g*_λ}(p)`.
pub fn prox_gstar(p: &[f64], tau: f64, c: &[f64], lambda: f64, n: f64) -> Result<ProxOutput> {
    check(tau, lambda, n, p.len(), c.len())?;
    let log_scale = (lambda * tau * n).ln();
    let mut clamped = 0;
    let values = p
        .iter()
        .zip(c)
        .map(|(&pk, &ck)| {
            let (w, hit) = w_of_log(log_scale + lambda * (pk - ck) - 1.0);
            clamped += hit as usize;
            pk - w / lambda
        })
        .collect();
    Ok(ProxOutput { values, clamped })
}

/// `prox_{τ g_λ}(r) = r − τ prox_{g*_λ/τ}(r/τ)` (Moreau).
///
/// Substituting the closed form of the inner prox, the result is
/// `(τ/λ) W((λN/τ) exp(λ(r/τ − c) − 1))`, which avoids the cancellation in
/// `r − τ(r/τ − ·)` and is non-negative by construction.
pub fn prox_g(r: &[f64], tau: f64, c: &[f64], lambda: f64, n: f64) -> Result<ProxOutput> {
    check(tau, lambda, n, r.len(), c.len())?;
    let log_scale = (lambda * n / tau).ln();
    let mut clamped = 0;
    let values = r
        .iter()
        .zip(c)
        .map(|(&rk, &ck)| {
            let (w, hit) = w_of_log(log_scale + lambda * (rk / tau - ck) - 1.0);
            clamped += hit as usize;
            tau * w / lambda
        })
        .collect();
    Ok(ProxOutput { values, clamped })
}

/// In-place `prox_{τ g_λ}` for the solver's inner loop; returns the clamp count.
pub(crate) fn prox_g_in_place(r: &mut [f64], tau: f64, c: &[f64], lambda: f64, n: f64) -> usize {
    let log_scale = (lambda * n / tau).ln();
    let mut clamped = 0;
    for (rk, &ck) in r.iter_mut().zip(c) {
        let (w, hit) = w_of_log(log_scale + lambda * (*rk / tau - ck) - 1.0);
        clamped += hit as usize;
        *rk = tau * w / lambda;
    }
    clamped
}
