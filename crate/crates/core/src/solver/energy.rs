//! Relaxed and binary segmentation energies.

use serde::{Deserialize, Serialize};

use super::{Backend, Problem, SolverConfig};
use crate::error::{Error, Result};
use crate::linops::{apply_h, total_variation, ProbabilityMap};
use crate::transport::{mk_lp_oracle, mk_reg_primal, sinkhorn_run, CostMatrix, SinkhornOptions};

/// `λ·max(C)` used when the exact path has to fall back to Sinkhorn.
const FALLBACK_LAMBDA_SCALE: f64 = 1000.0;

/// Energy value split into its terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub value: f64,
    pub tv: f64,
    pub fidelity_fg: f64,
    pub fidelity_bg: f64,
    /// False when a fidelity term could not be evaluated by the backend's own
    /// distance (LP too large, or Sinkhorn short of tolerance).
    pub exact: bool,
}

/// The backend's distance between two histograms of equal mass.
///
/// `normalization` is the `N` of the normalized entropic cost; it only matters
/// for the Sinkhorn backends.
pub fn fidelity(
    x: &[f64],
    y: &[f64],
    cost: &CostMatrix,
    backend: Backend,
    lambda: Option<f64>,
    normalization: f64,
) -> Result<(f64, bool)> {
    if x.len() != cost.rows || y.len() != cost.cols {
        return Err(Error::dims(format!(
            "histograms of length {}/{} for a {}x{} cost",
            x.len(),
            y.len(),
            cost.rows,
            cost.cols
        )));
    }
    match backend {
        Backend::L1 => Ok((x.iter().zip(y).map(|(a, b)| (a - b).abs()).sum(), true)),
        Backend::ExactMk => {
            if cost.rows * cost.cols <= crate::transport::LP_MAX_CELLS {
                Ok((mk_lp_oracle(x, y, cost)?.cost, true))
            } else {
                let lambda = FALLBACK_LAMBDA_SCALE / cost.max().max(f64::MIN_POSITIVE);
                let (value, _) = entropic(x, y, cost, lambda, normalization)?;
                Ok((value, false))
            }
        }
        Backend::SinkhornGrad | Backend::SinkhornProx => {
            let lambda = lambda.ok_or_else(|| Error::invalid("sinkhorn energy needs a finite lambda"))?;
            entropic(x, y, cost, lambda, normalization)
        }
    }
}

/// Normalized regularized primal value at the Sinkhorn plan, computed on the
/// support of both histograms.
fn entropic(x: &[f64], y: &[f64], cost: &CostMatrix, lambda: f64, normalization: f64) -> Result<(f64, bool)> {
    let rows: Vec<usize> = (0..x.len()).filter(|&i| x[i] > 0.0).collect();
    let cols: Vec<usize> = (0..y.len()).filter(|&j| y[j] > 0.0).collect();
    if rows.is_empty() || cols.is_empty() {
        return Ok((0.0, true));
    }
    let mut data = Vec::with_capacity(rows.len() * cols.len());
    for &j in &cols {
        data.extend(rows.iter().map(|&i| cost.get(i, j)));
    }
    let sub = CostMatrix::from_column_major(rows.len(), cols.len(), data)?;
    let xs: Vec<f64> = rows.iter().map(|&i| x[i]).collect();
    let mut ys: Vec<f64> = cols.iter().map(|&j| y[j]).collect();
    // Rounding in the two masses would otherwise trip the mass check.
    let (mx, my): (f64, f64) = (xs.iter().sum(), ys.iter().sum());
    ys.iter_mut().for_each(|v| *v *= mx / my);
    let opts = SinkhornOptions { tol: 1e-7 * mx.max(1.0), max_iter: 20_000 };
    let res = sinkhorn_run(&xs, &ys, &sub, lambda, opts)?;
    Ok((mk_reg_primal(&sub, lambda, &res.plan.data, Some(normalization)), res.converged))
}

/// `ρ TV(u) + D(Hu, Au) + D(H(1−u), B(1−u))`.
pub fn relaxed_energy(u: &ProbabilityMap, problem: &Problem, cfg: &SolverConfig) -> Result<EnergyReport> {
    let bins = &problem.bins;
    if u.width != bins.width || u.height != bins.height {
        return Err(Error::dims("probability map and bin map differ in size"));
    }
    if u.values.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::invalid("relaxed energy needs u in [0,1]"));
    }
    let n = u.len() as f64;
    let tv = cfg.rho * total_variation(u.width, u.height, &u.values);
    let hu = apply_h(bins, &u.values);
    let mass: f64 = u.values.iter().sum();
    let au: Vec<f64> = problem.a.0.iter().map(|v| v * mass).collect();
    let complement: Vec<f64> = u.values.iter().map(|v| 1.0 - v).collect();
    let hc = apply_h(bins, &complement);
    let bc: Vec<f64> = problem.b.0.iter().map(|v| v * (n - mass)).collect();
    let (fg, fg_exact) = fidelity(&hu, &au, &problem.cost, cfg.backend, cfg.lambda, n)?;
    let (bg, bg_exact) = fidelity(&hc, &bc, &problem.cost, cfg.backend, cfg.lambda, n)?;
    Ok(EnergyReport { value: tv + fg + bg, tv, fidelity_fg: fg, fidelity_bg: bg, exact: fg_exact && bg_exact })
}

/// Non-relaxed energy of a binary region: `ρ Per(R)` plus the distances between
/// the exemplars and the normalized histograms of `R` and its complement.
///
/// Returns `None` when either region is empty.
pub fn binary_energy(mask: &[bool], problem: &Problem, cfg: &SolverConfig) -> Result<Option<EnergyReport>> {
    let bins = &problem.bins;
    if mask.len() != bins.pixel_count() {
        return Err(Error::dims("mask and bin map differ in size"));
    }
    let inside = mask.iter().filter(|&&v| v).count();
    if inside == 0 || inside == mask.len() {
        return Ok(None);
    }
    let indicator: Vec<f64> = mask.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
    let tv = cfg.rho * total_variation(bins.width, bins.height, &indicator);
    let mut h_in = vec![0.0; bins.m];
    let mut h_out = vec![0.0; bins.m];
    for (&bin, &v) in bins.bins.iter().zip(mask) {
        if v {
            h_in[bin as usize] += 1.0;
        } else {
            h_out[bin as usize] += 1.0;
        }
    }
    let outside = (mask.len() - inside) as f64;
    h_in.iter_mut().for_each(|v| *v /= inside as f64);
    h_out.iter_mut().for_each(|v| *v /= outside);
    let (fg, fg_exact) = fidelity(&h_in, &problem.a.0, &problem.cost, cfg.backend, cfg.lambda, 1.0)?;
    let (bg, bg_exact) = fidelity(&h_out, &problem.b.0, &problem.cost, cfg.backend, cfg.lambda, 1.0)?;
    Ok(Some(EnergyReport {
        value: tv + fg + bg,
        tv,
        fidelity_fg: fg,
        fidelity_bg: bg,
        exact: fg_exact && bg_exact,
    }))
}
