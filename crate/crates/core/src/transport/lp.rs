//! Exact Monge-Kantorovich cost by the transportation simplex (MODI method).
//!
//! Dense and meant for desk-scale histograms: a basis is a spanning tree of
//! `M_a + M_b − 1` cells of the bipartite row/column graph. The solver switches
//! to Bland's rule after a run of degenerate pivots to rule out cycling.

use std::collections::VecDeque;

use super::{check_histograms, CostMatrix, DualPotentials, TransportPlan};
use crate::error::{Error, Result};

/// Largest `M_a · M_b` accepted by the oracle.
pub const LP_MAX_CELLS: usize = 10_000;

/// Optimal plan, cost and dual potentials of the transport LP.
#[derive(Debug, Clone)]
pub struct LpSolution {
    pub cost: f64,
    pub plan: TransportPlan,
    pub potentials: DualPotentials,
    pub pivots: usize,
}

struct Basis {
    rows: usize,
    cols: usize,
    /// Basic cells `(i, j)` and their values.
    cells: Vec<(usize, usize)>,
    values: Vec<f64>,
}

impl Basis {
    fn northwest(a: &[f64], b: &[f64]) -> Self {
        let (rows, cols) = (a.len(), b.len());
        let mut ra = a.to_vec();
        let mut cb = b.to_vec();
        let (mut i, mut j) = (0, 0);
        let mut cells = Vec::with_capacity(rows + cols - 1);
        let mut values = Vec::with_capacity(rows + cols - 1);
        loop {
            let x = ra[i].min(cb[j]).max(0.0);
            cells.push((i, j));
            values.push(x);
            ra[i] -= x;
            cb[j] -= x;
            if i == rows - 1 && j == cols - 1 {
                break;
            }
            if i == rows - 1 {
                j += 1;
            } else if j == cols - 1 || ra[i] <= cb[j] {
                i += 1;
            } else {
                j += 1;
            }
        }
        // The last cell absorbs rounding so both marginals close.
        Self { rows, cols, cells, values }
    }

    /// Adjacency lists of the tree: node `i` is row `i`, node `rows + j` is column `j`.
    fn adjacency(&self) -> Vec<Vec<(usize, usize)>> {
        let mut adj = vec![Vec::new(); self.rows + self.cols];
        for (k, &(i, j)) in self.cells.iter().enumerate() {
            adj[i].push((self.rows + j, k));
            adj[self.rows + j].push((i, k));
        }
        adj
    }

    fn potentials(&self, cost: &CostMatrix, adj: &[Vec<(usize, usize)>]) -> (Vec<f64>, Vec<f64>) {
        let total = self.rows + self.cols;
        let mut pot = vec![f64::NAN; total];
        let mut queue = VecDeque::new();
        pot[0] = 0.0;
        queue.push_back(0);
        while let Some(node) = queue.pop_front() {
            for &(next, k) in &adj[node] {
                if pot[next].is_nan() {
                    let (i, j) = self.cells[k];
                    pot[next] = cost.get(i, j) - pot[node];
                    queue.push_back(next);
                }
            }
        }
        (pot[..self.rows].to_vec(), pot[self.rows..].to_vec())
    }

    /// Basic cells on the tree path from row `from` to column `to`, in order.
    fn path(&self, adj: &[Vec<(usize, usize)>], from: usize, to: usize) -> Vec<usize> {
        let total = self.rows + self.cols;
        let mut parent: Vec<Option<(usize, usize)>> = vec![None; total];
        let mut seen = vec![false; total];
        let mut queue = VecDeque::new();
        seen[from] = true;
        queue.push_back(from);
        while let Some(node) = queue.pop_front() {
            if node == to {
                break;
            }
            for &(next, k) in &adj[node] {
                if !seen[next] {
                    seen[next] = true;
                    parent[next] = Some((node, k));
                    queue.push_back(next);
                }
            }
        }
        let mut cells = Vec::new();
        let mut node = to;
        while let Some((prev, k)) = parent[node] {
            cells.push(k);
            node = prev;
        }
        cells.reverse();
        cells
    }
}

/// Solves `min ⟨P,C⟩` over couplings with marginals `a` and `b`.
///
/// Masses must agree within `1e-9` (relative to the larger of the mass and 1).
pub fn mk_lp_oracle(a: &[f64], b: &[f64], cost: &CostMatrix) -> Result<LpSolution> {
    check_histograms(a, b, cost)?;
    let (rows, cols) = (cost.rows, cost.cols);
    if rows * cols > LP_MAX_CELLS {
        return Err(Error::invalid(format!(
            "LP oracle is limited to {LP_MAX_CELLS} cells, got {rows}x{cols}"
        )));
    }

    let mut basis = Basis::northwest(a, b);
    let scale = cost.max().max(1.0);
    let eps = 1e-12 * scale;
    let max_pivots = 50 * rows * cols + 1000;
    let mut degenerate_run = 0usize;
    let mut bland = false;
    let mut pivots = 0usize;

    loop {
        let adj = basis.adjacency();
        let (u, v) = basis.potentials(cost, &adj);
        let mut in_basis = vec![false; rows * cols];
        for &(i, j) in &basis.cells {
            in_basis[i * cols + j] = true;
        }

        let mut entering: Option<((usize, usize), f64)> = None;
        'search: for i in 0..rows {
            for j in 0..cols {
                if in_basis[i * cols + j] {
                    continue;
                }
                let reduced = cost.get(i, j) - u[i] - v[j];
                if reduced < -eps {
                    if bland {
                        entering = Some(((i, j), reduced));
                        break 'search;
                    }
                    if entering.is_none_or(|(_, best)| reduced < best) {
                        entering = Some(((i, j), reduced));
                    }
                }
            }
        }

        let Some(((ei, ej), _)) = entering else {
            let mut data = vec![0.0; rows * cols];
            for (&(i, j), &x) in basis.cells.iter().zip(&basis.values) {
                data[i + j * rows] = x;
            }
            let plan = TransportPlan { rows, cols, data };
            let cost_value = plan.cost(cost);
            return Ok(LpSolution { cost: cost_value, plan, potentials: DualPotentials { u, v }, pivots });
        };

        pivots += 1;
        if pivots > max_pivots {
            return Err(Error::invalid(format!("transport simplex exceeded {max_pivots} pivots")));
        }

        // Cycle: entering cell gains θ, path cells alternate −θ, +θ, ...
        let path = basis.path(&adj, ei, rows + ej);
        let minus: Vec<usize> = path.iter().step_by(2).copied().collect();
        let theta = minus.iter().map(|&k| basis.values[k]).fold(f64::INFINITY, f64::min);
        let leaving = minus
            .iter()
            .copied()
            .filter(|&k| basis.values[k] <= theta)
            .min_by_key(|&k| {
                let (i, j) = basis.cells[k];
                i * cols + j
            })
            .expect("cycle has a decreasing cell");

        for (pos, &k) in path.iter().enumerate() {
            if pos % 2 == 0 {
                basis.values[k] = (basis.values[k] - theta).max(0.0);
            } else {
                basis.values[k] += theta;
            }
        }
        basis.cells[leaving] = (ei, ej);
        basis.values[leaving] = theta;

        if theta <= 0.0 {
            degenerate_run += 1;
            if degenerate_run > 50 {
                bland = true;
            }
        } else {
            degenerate_run = 0;
        }
    }
}
