//! The stacked operator of the saddle problem for each backend.
//!
//! Primal vectors are `[u]` or, for the slack backends, `[u; r_A; r_B]` with each
//! `r` a column-wise `M × M` block. Dual vectors are always
//! `[p_A, q_A, p_B, q_B, p_C.x, p_C.y]`.

use super::Backend;
use crate::features::{BinMap, Histogram};
use crate::linops::{div_accumulate, dot, grad_into, LinearOperator};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Coupling {
    /// `K = [H; A; −H; −B; ∇]`.
    Plain,
    /// `K` plus the `−Lᵀr` blocks of the bidualized transport terms.
    Slack,
    /// `[(H−A); 0; −(H−B); 0; ∇]`.
    L1,
}

/// Backend-specific `K` as a [`LinearOperator`] on flat vectors.
#[derive(Debug, Clone)]
pub struct SaddleOperator<'a> {
    bins: &'a BinMap,
    a: &'a Histogram,
    b: &'a Histogram,
    coupling: Coupling,
}

impl<'a> SaddleOperator<'a> {
    pub fn new(bins: &'a BinMap, a: &'a Histogram, b: &'a Histogram, backend: Backend) -> Self {
        let coupling = match backend {
            Backend::SinkhornGrad => Coupling::Plain,
            Backend::ExactMk | Backend::SinkhornProx => Coupling::Slack,
            Backend::L1 => Coupling::L1,
        };
        Self { bins, a, b, coupling }
    }

    pub fn m(&self) -> usize {
        self.bins.m
    }

    pub fn pixels(&self) -> usize {
        self.bins.pixel_count()
    }

    /// Length of one slack block (`M²`, or 0 without slacks).
    pub fn slack_len(&self) -> usize {
        if self.coupling == Coupling::Slack {
            self.bins.m * self.bins.m
        } else {
            0
        }
    }
}

impl LinearOperator for SaddleOperator<'_> {
    fn input_len(&self) -> usize {
        self.pixels() + 2 * self.slack_len()
    }

    fn output_len(&self) -> usize {
        4 * self.m() + 2 * self.pixels()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let m = self.m();
        let n = self.pixels();
        let u = &x[..n];
        y[..4 * m].iter_mut().for_each(|v| *v = 0.0);
        let mut mass = 0.0;
        for (&bin, &v) in self.bins.bins.iter().zip(u) {
            y[bin as usize] += v;
            mass += v;
        }
        match self.coupling {
            Coupling::Plain | Coupling::Slack => {
                for i in 0..m {
                    y[m + i] = self.a.0[i] * mass;
                    y[2 * m + i] = -y[i];
                    y[3 * m + i] = -self.b.0[i] * mass;
                }
            }
            Coupling::L1 => {
                for i in 0..m {
                    let h = y[i];
                    y[i] = h - self.a.0[i] * mass;
                    y[2 * m + i] = -(h - self.b.0[i] * mass);
                }
            }
        }
        if self.coupling == Coupling::Slack {
            let mm = m * m;
            for (block, r) in [(0, &x[n..n + mm]), (2 * m, &x[n + mm..])] {
                for j in 0..m {
                    let col = &r[j * m..(j + 1) * m];
                    let mut s = 0.0;
                    for (i, &rij) in col.iter().enumerate() {
                        y[block + i] -= rij;
                        s += rij;
                    }
                    y[block + m + j] -= s;
                }
            }
        }
        let (gx, gy) = y[4 * m..].split_at_mut(n);
        grad_into(self.bins.width, self.bins.height, u, gx, gy);
    }

    fn apply_adjoint(&self, y: &[f64], x: &mut [f64]) {
        let m = self.m();
        let n = self.pixels();
        let (p_a, rest) = y.split_at(m);
        let (q_a, rest) = rest.split_at(m);
        let (p_b, rest) = rest.split_at(m);
        let (q_b, pc) = rest.split_at(m);
        let (u_part, slack) = x.split_at_mut(n);
        let constant = match self.coupling {
            Coupling::Plain | Coupling::Slack => dot(&self.a.0, q_a) - dot(&self.b.0, q_b),
            Coupling::L1 => dot(&self.b.0, p_b) - dot(&self.a.0, p_a),
        };
        for (xi, &bin) in u_part.iter_mut().zip(&self.bins.bins) {
            let k = bin as usize;
            *xi = p_a[k] - p_b[k] + constant;
        }
        div_accumulate(self.bins.width, self.bins.height, &pc[..n], &pc[n..], -1.0, u_part);
        if self.coupling == Coupling::Slack {
            let (r_a, r_b) = slack.split_at_mut(m * m);
            for (r, p, q) in [(r_a, p_a, q_a), (r_b, p_b, q_b)] {
                for j in 0..m {
                    for i in 0..m {
                        r[i + j * m] = -(p[i] + q[j]);
                    }
                }
            }
        }
    }
}
