//! Sinkhorn scaling for the entropy-regularized transport problem.
//!
//! For moderate `λ·max(C)` the classic scaling `x ← a / (K y)`, `y ← b / (Kᵀ x)`
//! with `K = e^{−λC}` is used. Above [`LOG_DOMAIN_THRESHOLD`] the kernel
//! under- or overflows, so the same fixed point is computed on potentials with
//! log-sum-exp updates, warm-started through a geometric schedule of `λ`.

use super::{check_histograms, marginals, CostMatrix, DualPotentials, TransportPlan};
use crate::error::{Error, Result};

/// `λ·max(C)` above which the iteration runs in the log domain.
pub const LOG_DOMAIN_THRESHOLD: f64 = 30.0;

#[derive(Debug, Clone, Copy)]
pub struct SinkhornOptions {
    /// Stop once `‖P1 − a‖₁ + ‖Pᵀ1 − b‖₁ < tol`.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SinkhornOptions {
    fn default() -> Self {
        Self { tol: 1e-9, max_iter: 200_000 }
    }
}

/// Regularized optimal plan with potentials `(u, v)` such that
/// `P_{i,j} = exp(λ(u_i + v_j − C_{i,j}))`.
#[derive(Debug, Clone)]
pub struct SinkhornResult {
    pub plan: TransportPlan,
    pub potentials: DualPotentials,
    /// Transport cost `⟨P, C⟩` of the regularized plan.
    pub cost: f64,
    pub iterations: usize,
    pub violation: f64,
    pub log_domain: bool,
    pub converged: bool,
}

/// Runs Sinkhorn and fails with [`Error::NotConverged`] if `tol` is not reached.
pub fn sinkhorn_plan(a: &[f64], b: &[f64], cost: &CostMatrix, lambda: f64, opts: SinkhornOptions) -> Result<SinkhornResult> {
    let res = sinkhorn_run(a, b, cost, lambda, opts)?;
    if !res.converged {
        return Err(Error::NotConverged { iterations: res.iterations, violation: res.violation });
    }
    Ok(res)
}

/// Runs Sinkhorn and returns the last iterate even when `tol` was not reached.
pub fn sinkhorn_run(a: &[f64], b: &[f64], cost: &CostMatrix, lambda: f64, opts: SinkhornOptions) -> Result<SinkhornResult> {
    check_histograms(a, b, cost)?;
    if a.iter().chain(b).any(|&v| v <= 0.0) {
        return Err(Error::invalid("sinkhorn requires strictly positive histograms"));
    }
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::invalid(format!("lambda must be positive and finite, got {lambda}")));
    }
    if lambda * cost.max() > LOG_DOMAIN_THRESHOLD {
        Ok(log_domain(a, b, cost, lambda, opts))
    } else {
        Ok(scaling_domain(a, b, cost, lambda, opts))
    }
}

fn finish(
    a: &[f64],
    b: &[f64],
    cost: &CostMatrix,
    data: Vec<f64>,
    potentials: DualPotentials,
    iterations: usize,
    log_domain: bool,
    tol: f64,
) -> SinkhornResult {
    let plan = TransportPlan { rows: cost.rows, cols: cost.cols, data };
    let violation = plan.marginal_violation(a, b);
    SinkhornResult {
        cost: plan.cost(cost),
        plan,
        potentials,
        iterations,
        violation,
        log_domain,
        converged: violation < tol,
    }
}

fn scaling_domain(a: &[f64], b: &[f64], cost: &CostMatrix, lambda: f64, opts: SinkhornOptions) -> SinkhornResult {
    let (rows, cols) = (cost.rows, cost.cols);
    let kernel: Vec<f64> = cost.data.iter().map(|c| (-lambda * c).exp()).collect();
    let mut x = vec![1.0; rows];
    let mut y = vec![1.0; cols];
    let mut iterations = 0;
    let plan_of = |x: &[f64], y: &[f64]| -> Vec<f64> {
        let mut p = Vec::with_capacity(rows * cols);
        for j in 0..cols {
            p.extend((0..rows).map(|i| x[i] * kernel[i + j * rows] * y[j]));
        }
        p
    };
    while iterations < opts.max_iter {
        iterations += 1;
        for i in 0..rows {
            let ky: f64 = (0..cols).map(|j| kernel[i + j * rows] * y[j]).sum();
            x[i] = a[i] / ky;
        }
        for j in 0..cols {
            let ktx: f64 = (0..rows).map(|i| kernel[i + j * rows] * x[i]).sum();
            y[j] = b[j] / ktx;
        }
        let p = plan_of(&x, &y);
        let (r, c) = marginals(rows, cols, &p);
        if super::l1_gap(&r, a) + super::l1_gap(&c, b) < opts.tol {
            break;
        }
    }
    let potentials = DualPotentials {
        u: x.iter().map(|v| v.ln() / lambda).collect(),
        v: y.iter().map(|v| v.ln() / lambda).collect(),
    };
    finish(a, b, cost, plan_of(&x, &y), potentials, iterations, false, opts.tol)
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn log_domain(a: &[f64], b: &[f64], cost: &CostMatrix, lambda: f64, opts: SinkhornOptions) -> SinkhornResult {
    let (rows, cols) = (cost.rows, cost.cols);
    let log_a: Vec<f64> = a.iter().map(|v| v.ln()).collect();
    let log_b: Vec<f64> = b.iter().map(|v| v.ln()).collect();
    let mut u = vec![0.0; rows];
    let mut v = vec![0.0; cols];

    // λ schedule: start where the plain iteration would still be well conditioned.
    let cmax = cost.max();
    let mut schedule = vec![lambda];
    while schedule.last().copied().unwrap() * cmax > LOG_DOMAIN_THRESHOLD {
        let next = schedule.last().unwrap() / 4.0;
        schedule.push(next);
    }
    schedule.reverse();

    let plan_of = |u: &[f64], v: &[f64], lam: f64| -> Vec<f64> {
        let mut p = Vec::with_capacity(rows * cols);
        for j in 0..cols {
            p.extend((0..rows).map(|i| (lam * (u[i] + v[j] - cost.get(i, j))).exp()));
        }
        p
    };

    let mut iterations = 0;
    let stages = schedule.len();
    for (stage, &lam) in schedule.iter().enumerate() {
        let last = stage + 1 == stages;
        let tol = if last { opts.tol } else { opts.tol.max(1e-6) };
        loop {
            if iterations >= opts.max_iter {
                break;
            }
            iterations += 1;
            for i in 0..rows {
                let lse = log_sum_exp((0..cols).map(|j| lam * (v[j] - cost.get(i, j))));
                u[i] = (log_a[i] - lse) / lam;
            }
            for j in 0..cols {
                let lse = log_sum_exp((0..rows).map(|i| lam * (u[i] - cost.get(i, j))));
                v[j] = (log_b[j] - lse) / lam;
            }
            let p = plan_of(&u, &v, lam);
            let (r, c) = marginals(rows, cols, &p);
            if super::l1_gap(&r, a) + super::l1_gap(&c, b) < tol {
                break;
            }
        }
    }
    let plan = plan_of(&u, &v, lambda);
    finish(a, b, cost, plan, DualPotentials { u, v }, iterations, true, opts.tol)
}
