//! Optimal-transport mathematics: cost matrices, the exact LP oracle, Sinkhorn
//! scaling, the conjugates of the (normalized) Sinkhorn distance and their
//! gradients, the Lambert W function and the proximity operators built on it.
//!
//! Matrices of size `M_a × M_b` are stored column-wise: entry `(i, j)` lives at
//! `i + j * M_a`. The marginal operator `Lᵀ` maps such a plan to its row and
//! column sums, and its adjoint `L` maps `β = (u, v)` to `u_i + v_j`.

mod conjugate;
mod lambert;
mod lp;
mod prox;
mod sinkhorn;

pub use conjugate::{grad_mk_star_norm, lipschitz_bound, mk_star_norm, q_lambda, NormalizedConjugate};
pub use lambert::{lambert_w, lambert_w_of_exp, LAMBERT_TOL};
pub use lp::{mk_lp_oracle, LpSolution, LP_MAX_CELLS};
pub use prox::{prox_g, prox_gstar, ProxOutput, EXP_CLAMP};
pub(crate) use prox::prox_g_in_place;
pub use sinkhorn::{sinkhorn_plan, sinkhorn_run, SinkhornOptions, SinkhornResult, LOG_DOMAIN_THRESHOLD};

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::Codebook;

/// Ground cost between feature centroids.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum CostKind {
    /// `‖X_i − X_j‖^p` with `p ∈ {1, 2}`.
    Euclid { p: u32 },
    /// `1 − exp(−γ ‖X_i − X_j‖)`.
    ConcaveExp { gamma: f64 },
}

impl CostKind {
    /// Parses the command-line names `euclid1`, `euclid2` and `cexp`.
    pub fn from_name(name: &str, gamma: f64) -> Result<Self> {
        match name {
            "euclid1" => Ok(Self::Euclid { p: 1 }),
            "euclid2" => Ok(Self::Euclid { p: 2 }),
            "cexp" | "concave-exp" => Ok(Self::ConcaveExp { gamma }),
            other => Err(Error::invalid(format!("unknown cost kind `{other}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::Euclid { p } if p == 1 || p == 2 => Ok(()),
            Self::Euclid { p } => Err(Error::invalid(format!("euclidean cost exponent must be 1 or 2, got {p}"))),
            Self::ConcaveExp { gamma } if gamma > 0.0 && gamma.is_finite() => Ok(()),
            Self::ConcaveExp { gamma } => Err(Error::invalid(format!("gamma must be positive, got {gamma}"))),
        }
    }

    fn eval(&self, dist: f64) -> f64 {
        match *self {
            Self::Euclid { p } => dist.powi(p as i32),
            Self::ConcaveExp { gamma } => -(-gamma * dist).exp_m1(),
        }
    }
}

impl FromStr for CostKind {
    type Err = Error;

    /// Default rate `γ = 1` for the concave cost.
    fn from_str(s: &str) -> Result<Self> {
        Self::from_name(s, 1.0)
    }
}

/// Ground-cost matrix, column-wise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl CostMatrix {
    pub fn from_column_major(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols || rows == 0 || cols == 0 {
            return Err(Error::dims(format!("{} entries for a {rows}x{cols} cost", data.len())));
        }
        if data.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
            return Err(Error::invalid("cost entries must be finite and non-negative"));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a cost from row vectors `rows[i][j] = C_{i,j}`.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::dims("ragged cost matrix"));
        }
        let mut data = vec![0.0; r * c];
        for (i, row) in rows.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                data[i + j * r] = v;
            }
        }
        Self::from_column_major(r, c, data)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i + j * self.rows]
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(0.0, f64::max)
    }

    pub fn transpose(&self) -> Self {
        let mut data = vec![0.0; self.data.len()];
        for j in 0..self.cols {
            for i in 0..self.rows {
                data[j + i * self.cols] = self.get(i, j);
            }
        }
        Self { rows: self.cols, cols: self.rows, data }
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|i| (0..self.cols).map(|j| self.get(i, j)).collect()).collect()
    }
}

/// Cost between two codebooks (`C_{i,j}` from `from[i]` to `to[j]`).
pub fn cost_matrix_between(from: &Codebook, to: &Codebook, kind: CostKind) -> Result<CostMatrix> {
    kind.validate()?;
    if from.n != to.n {
        return Err(Error::dims("codebooks of different feature dimension"));
    }
    let (r, c) = (from.m, to.m);
    let mut data = vec![0.0; r * c];
    for j in 0..c {
        for i in 0..r {
            let d: f64 = from.centroids[i]
                .iter()
                .zip(&to.centroids[j])
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            data[i + j * r] = kind.eval(d);
        }
    }
    CostMatrix::from_column_major(r, c, data)
}

/// Square cost of a codebook against itself; the diagonal is exactly zero.
pub fn cost_matrix(codebook: &Codebook, kind: CostKind) -> Result<CostMatrix> {
    cost_matrix_between(codebook, codebook, kind)
}

/// Non-negative coupling matrix, column-wise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransportPlan {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl TransportPlan {
    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i + j * self.rows]
    }

    pub fn row_sums(&self) -> Vec<f64> {
        marginals(self.rows, self.cols, &self.data).0
    }

    pub fn col_sums(&self) -> Vec<f64> {
        marginals(self.rows, self.cols, &self.data).1
    }

    /// `‖P1 − a‖₁ + ‖Pᵀ1 − b‖₁`.
    pub fn marginal_violation(&self, a: &[f64], b: &[f64]) -> f64 {
        let (r, c) = marginals(self.rows, self.cols, &self.data);
        l1_gap(&r, a) + l1_gap(&c, b)
    }

    pub fn cost(&self, cost: &CostMatrix) -> f64 {
        self.data.iter().zip(&cost.data).map(|(p, c)| p * c).sum()
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|i| (0..self.cols).map(|j| self.get(i, j)).collect()).collect()
    }
}

pub(crate) fn l1_gap(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b).abs()).sum()
}

/// Row and column sums of a column-wise `rows × cols` matrix: `Lᵀp`.
pub fn marginals(rows: usize, cols: usize, p: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut r = vec![0.0; rows];
    let mut c = vec![0.0; cols];
    for j in 0..cols {
        let col = &p[j * rows..(j + 1) * rows];
        let mut s = 0.0;
        for (ri, &v) in r.iter_mut().zip(col) {
            *ri += v;
            s += v;
        }
        c[j] = s;
    }
    (r, c)
}

/// `(Lβ)_{i,j} = u_i + v_j`, column-wise.
pub fn lift_potentials(u: &[f64], v: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(u.len() * v.len());
    for &vj in v {
        out.extend(u.iter().map(|&ui| ui + vj));
    }
    out
}

/// Transport dual vector `β = (u, v)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualPotentials {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

impl DualPotentials {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { u: vec![0.0; rows], v: vec![0.0; cols] }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.u.iter().chain(&self.v).copied().collect()
    }
}

/// Dual objective `⟨a,u⟩ + ⟨b,v⟩`.
pub fn mk_dual_value(a: &[f64], b: &[f64], beta: &DualPotentials) -> f64 {
    crate::linops::dot(a, &beta.u) + crate::linops::dot(b, &beta.v)
}

/// Largest violation `max_{i,j}(u_i + v_j − C_{i,j})` (≤ 0 when feasible).
pub fn mk_dual_violation(beta: &DualPotentials, cost: &CostMatrix) -> f64 {
    let mut worst = f64::NEG_INFINITY;
    for j in 0..cost.cols {
        for i in 0..cost.rows {
            worst = worst.max(beta.u[i] + beta.v[j] - cost.get(i, j));
        }
    }
    worst
}

/// Feasibility of `β` for the MK dual, `u_i + v_j ≤ C_{i,j}` up to 1e-9.
pub fn mk_dual_feasible(beta: &DualPotentials, cost: &CostMatrix) -> bool {
    beta.u.len() == cost.rows && beta.v.len() == cost.cols && mk_dual_violation(beta, cost) <= 1e-9
}

/// Entropy `h(P) = −⟨P, log P⟩` with `0 log 0 = 0`.
pub fn entropy(plan: &[f64]) -> f64 {
    -plan.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>()
}

/// Regularized primal objective at `plan`.
///
/// With `normalization = None` this is `⟨P,C⟩ − h(P)/λ`; with `Some(N)` it is the
/// normalized variant `⟨P, C + log(P/N)/λ⟩`.
pub fn mk_reg_primal(cost: &CostMatrix, lambda: f64, plan: &[f64], normalization: Option<f64>) -> f64 {
    let transport: f64 = plan.iter().zip(&cost.data).map(|(p, c)| p * c).sum();
    match normalization {
        None => transport - entropy(plan) / lambda,
        Some(n) => {
            let log_term: f64 = plan.iter().filter(|&&p| p > 0.0).map(|&p| p * (p / n).ln()).sum();
            transport + log_term / lambda
        }
    }
}

pub(crate) fn check_histograms(a: &[f64], b: &[f64], cost: &CostMatrix) -> Result<()> {
    if a.len() != cost.rows || b.len() != cost.cols {
        return Err(Error::dims(format!(
            "histograms of length {}/{} for a {}x{} cost",
            a.len(),
            b.len(),
            cost.rows,
            cost.cols
        )));
    }
    if a.iter().chain(b).any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::invalid("histogram entries must be finite and non-negative"));
    }
    let (ma, mb): (f64, f64) = (a.iter().sum(), b.iter().sum());
    if (ma - mb).abs() > 1e-9 * ma.max(mb).max(1.0) {
        return Err(Error::MassMismatch(ma, mb));
    }
    Ok(())
}
