//! Conjugate of the normalized Sinkhorn distance and its gradient.
//!
//! With `Q_λ(β) = exp(λ(Lβ − c) − 1)` and `s = ⟨Q,1⟩`, the conjugate is
//! `(N/λ)s` when `s ≤ 1` and `(N/λ)(log s + 1)` otherwise. Both the value and
//! the gradient are evaluated through `log s` so large `λ` never overflows.

use super::{CostMatrix, DualPotentials};
use crate::error::{Error, Result};

/// Exponent clamp used when forming `Q` explicitly.
const Q_EXP_CLAMP: f64 = 700.0;

/// `Q_{i,j} = exp(λ(u_i + v_j − C_{i,j}) − 1)`, column-wise, with exponents
/// clamped at 700. The flag reports whether any entry hit the clamp.
pub fn q_lambda(beta: &DualPotentials, cost: &CostMatrix, lambda: f64) -> (Vec<f64>, bool) {
    let mut overflow = false;
    let mut q = Vec::with_capacity(cost.rows * cost.cols);
    for j in 0..cost.cols {
        for i in 0..cost.rows {
            let mut z = lambda * (beta.u[i] + beta.v[j] - cost.get(i, j)) - 1.0;
            if z > Q_EXP_CLAMP {
                z = Q_EXP_CLAMP;
                overflow = true;
            }
            q.push(z.exp());
        }
    }
    (q, overflow)
}

/// Lipschitz bound `2λN` of the conjugate's gradient.
pub fn lipschitz_bound(lambda: f64, n: f64) -> f64 {
    2.0 * lambda * n
}

/// Evaluates `MK*_{λ,≤N}` and its gradient with reusable scratch space.
#[derive(Debug, Clone)]
pub struct NormalizedConjugate<'a> {
    pub cost: &'a CostMatrix,
    pub lambda: f64,
    pub n: f64,
    exponents: Vec<f64>,
}

impl<'a> NormalizedConjugate<'a> {
    pub fn new(cost: &'a CostMatrix, lambda: f64, n: f64) -> Result<Self> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::invalid(format!("lambda must be positive and finite, got {lambda}")));
        }
        if !(n > 0.0 && n.is_finite()) {
            return Err(Error::invalid(format!("N must be positive, got {n}")));
        }
        Ok(Self { cost, lambda, n, exponents: vec![0.0; cost.rows * cost.cols] })
    }

    /// Fills the exponents `λ(u_i+v_j−C_{i,j}) − 1` and returns `log ⟨Q,1⟩`.
    fn log_mass(&mut self, u: &[f64], v: &[f64]) -> Result<f64> {
        let rows = self.cost.rows;
        let mut max = f64::NEG_INFINITY;
        for (j, &vj) in v.iter().enumerate() {
            for (i, &ui) in u.iter().enumerate() {
                let z = self.lambda * (ui + vj - self.cost.data[i + j * rows]) - 1.0;
                self.exponents[i + j * rows] = z;
                max = max.max(z);
            }
        }
        if !max.is_finite() {
            return Err(Error::invalid("non-finite dual potentials"));
        }
        let sum: f64 = self.exponents.iter().map(|z| (z - max).exp()).sum();
        Ok(max + sum.ln())
    }

    pub fn value(&mut self, u: &[f64], v: &[f64]) -> Result<f64> {
        let log_s = self.log_mass(u, v)?;
        let scale = self.n / self.lambda;
        Ok(if log_s <= 0.0 { scale * log_s.exp() } else { scale * (log_s + 1.0) })
    }

    /// Writes the gradient into `(grad_u, grad_v)` and returns `log ⟨Q,1⟩`.
    ///
    /// The gradient is the pair of marginals of the optimal plan `N·Q` (if
    /// `⟨Q,1⟩ ≤ 1`) or `N·Q/⟨Q,1⟩` (otherwise).
    pub fn gradient_into(&mut self, u: &[f64], v: &[f64], grad_u: &mut [f64], grad_v: &mut [f64]) -> Result<f64> {
        let log_s = self.log_mass(u, v)?;
        let shift = log_s.max(0.0);
        let rows = self.cost.rows;
        grad_u.iter_mut().for_each(|g| *g = 0.0);
        for (j, gv) in grad_v.iter_mut().enumerate() {
            let mut col = 0.0;
            for (i, gu) in grad_u.iter_mut().enumerate() {
                let p = self.n * (self.exponents[i + j * rows] - shift).exp();
                *gu += p;
                col += p;
            }
            *gv = col;
        }
        Ok(log_s)
    }
}

/// `MK*_{λ,≤N}(β)`.
pub fn mk_star_norm(beta: &DualPotentials, cost: &CostMatrix, lambda: f64, n: f64) -> Result<f64> {
    check_shape(beta, cost)?;
    NormalizedConjugate::new(cost, lambda, n)?.value(&beta.u, &beta.v)
}

/// `∇MK*_{λ,≤N}(β)`, shaped like `β`.
pub fn grad_mk_star_norm(beta: &DualPotentials, cost: &CostMatrix, lambda: f64, n: f64) -> Result<DualPotentials> {
    check_shape(beta, cost)?;
    let mut g = DualPotentials::zeros(cost.rows, cost.cols);
    NormalizedConjugate::new(cost, lambda, n)?.gradient_into(&beta.u, &beta.v, &mut g.u, &mut g.v)?;
    Ok(g)
}

fn check_shape(beta: &DualPotentials, cost: &CostMatrix) -> Result<()> {
    if beta.u.len() != cost.rows || beta.v.len() != cost.cols {
        return Err(Error::dims(format!(
            "potentials of length {}/{} for a {}x{} cost",
            beta.u.len(),
            beta.v.len(),
            cost.rows,
            cost.cols
        )));
    }
    Ok(())
}
