//! First-order primal-dual iteration for the relaxed segmentation problem.
//!
//! The saddle problem is `min_x max_y ⟨Kx, y⟩ + H(x) − F*(y) − G*(y)` with
//! `x = u` (plus transport slacks for the bidualized backends) and
//! `y = (p_A, q_A, p_B, q_B, p_C)`. Each iteration is
//!
//! ```text
//! x⁺ = Proj(x − τ(Kᵀy + ∇H))
//! y⁺ = Prox_{σF*}(y + σ(K(2x⁺ − x) − ∇G*(y)))
//! ```
//!
//! The constant part of the background term, `⟨H1, p_B⟩ + ⟨B1, q_B⟩`, is a
//! linear function of the dual and lives in `G*` for every backend.

mod energy;
mod operator;

use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use energy::{binary_energy, fidelity, relaxed_energy, EnergyReport};
pub use operator::SaddleOperator;

use crate::error::{Error, Result};
use crate::features::{BinMap, Histogram};
use crate::linops::{norm2, op_norm, project_ball, DualStack, LinearOperator, ProbabilityMap};
use crate::transport::{lipschitz_bound, marginals, prox_g_in_place, CostMatrix, NormalizedConjugate};

/// Fidelity backend.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backend {
    /// Exact Monge-Kantorovich distance through transport slacks.
    ExactMk,
    /// Normalized Sinkhorn distance with an explicit gradient step on its conjugate.
    SinkhornGrad,
    /// Normalized Sinkhorn distance through slacks with a Lambert W prox.
    SinkhornProx,
    /// Bin-to-bin L1 distance.
    #[serde(alias = "l1-baseline")]
    L1,
}

impl Backend {
    pub const ALL: [Backend; 4] = [Backend::ExactMk, Backend::SinkhornGrad, Backend::SinkhornProx, Backend::L1];

    pub fn name(self) -> &'static str {
        match self {
            Backend::ExactMk => "exact-mk",
            Backend::SinkhornGrad => "sinkhorn-grad",
            Backend::SinkhornProx => "sinkhorn-prox",
            Backend::L1 => "l1",
        }
    }

    pub fn needs_lambda(self) -> bool {
        matches!(self, Backend::SinkhornGrad | Backend::SinkhornProx)
    }

    pub fn has_slacks(self) -> bool {
        matches!(self, Backend::ExactMk | Backend::SinkhornProx)
    }
}

impl std::fmt::Display for Backend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Backend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact-mk" => Ok(Backend::ExactMk),
            "sinkhorn-grad" => Ok(Backend::SinkhornGrad),
            "sinkhorn-prox" => Ok(Backend::SinkhornProx),
            "l1" | "l1-baseline" => Ok(Backend::L1),
            other => Err(Error::invalid(format!("unknown backend `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub rho: f64,
    /// Sinkhorn parameter; `None` stands for `λ = ∞` (exact transport).
    pub lambda: Option<f64>,
    pub backend: Backend,
    pub max_iter: usize,
    /// Dual step; chosen from the Lipschitz constant and `‖K‖` when unset.
    pub sigma: Option<f64>,
    /// `s` in the automatic dual step `σ = 1/(L_G* + s‖K‖)`, which makes
    /// `τ = s/‖K‖`. Larger values favour the primal variables; 1 balances both.
    pub step_balance: f64,
    pub check_every: usize,
    pub seed: u64,
    /// Stop once the residual at a checkpoint falls below this value.
    pub early_stop: Option<f64>,
    /// Power iterations for `‖K‖`.
    pub norm_iters: usize,
    /// Evaluate the relaxed energy at each checkpoint.
    pub track_energy: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            rho: 0.1,
            lambda: None,
            backend: Backend::ExactMk,
            max_iter: 500,
            sigma: None,
            step_balance: 1.0,
            check_every: 50,
            seed: 0,
            early_stop: None,
            norm_iters: 100,
            track_energy: true,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho >= 0.0 && self.rho.is_finite()) {
            return Err(Error::invalid(format!("rho must be a finite non-negative number, got {}", self.rho)));
        }
        if self.backend.needs_lambda() {
            match self.lambda {
                Some(l) if l > 0.0 && l.is_finite() => {}
                _ => return Err(Error::invalid(format!("backend {} needs a finite lambda > 0", self.backend))),
            }
        }
        if let Some(s) = self.sigma {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::invalid(format!("sigma must be positive, got {s}")));
            }
        }
        if !(self.step_balance > 0.0 && self.step_balance.is_finite()) {
            return Err(Error::invalid(format!("step balance must be positive, got {}", self.step_balance)));
        }
        if self.check_every == 0 {
            return Err(Error::invalid("check_every must be at least 1"));
        }
        if self.norm_iters < 20 {
            return Err(Error::invalid("norm_iters must be at least 20"));
        }
        Ok(())
    }
}

/// Data of one segmentation problem.
#[derive(Debug, Clone)]
pub struct Problem {
    pub bins: BinMap,
    /// Foreground exemplar histogram (sums to 1).
    pub a: Histogram,
    /// Background exemplar histogram (sums to 1).
    pub b: Histogram,
    pub cost: CostMatrix,
}

impl Problem {
    pub fn new(bins: BinMap, a: Histogram, b: Histogram, cost: CostMatrix) -> Result<Self> {
        let m = bins.m;
        if a.len() != m || b.len() != m {
            return Err(Error::dims(format!("exemplars of length {}/{} for M={m}", a.len(), b.len())));
        }
        if cost.rows != m || cost.cols != m {
            return Err(Error::dims(format!("{}x{} cost for M={m}", cost.rows, cost.cols)));
        }
        for (name, h) in [("foreground", &a), ("background", &b)] {
            if h.0.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || (h.total() - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(format!("{name} exemplar must be a probability vector")));
            }
        }
        Ok(Self { bins, a, b, cost })
    }

    pub fn pixels(&self) -> usize {
        self.bins.pixel_count()
    }
}

/// `(τ, σ)` with `(1/τ − L_H)(1/σ − L_G*) ≥ ‖K‖²`.
///
/// Without an explicit `sigma`, `σ = 1/(L_G* + ‖K‖)`; `τ` then makes the rule
/// an equality.
pub fn step_sizes(l_h: f64, l_gstar: f64, norm_k: f64, sigma: Option<f64>) -> Result<(f64, f64)> {
    if !(norm_k > 0.0 && norm_k.is_finite()) {
        return Err(Error::StepSize(format!("operator norm must be positive, got {norm_k}")));
    }
    if !(l_h >= 0.0 && l_gstar >= 0.0) {
        return Err(Error::StepSize("Lipschitz constants must be non-negative".into()));
    }
    let sigma = sigma.unwrap_or(1.0 / (l_gstar + norm_k));
    if !(sigma > 0.0) || (l_gstar > 0.0 && sigma >= 1.0 / l_gstar) {
        return Err(Error::StepSize(format!("sigma = {sigma:e} leaves no room below 1/L_G* = {:e}", 1.0 / l_gstar)));
    }
    let slack = 1.0 / sigma - l_gstar;
    let tau = 1.0 / (l_h + norm_k * norm_k / slack);
    Ok((tau, sigma))
}

/// `(1/τ − L_H)(1/σ − L_G*) − ‖K‖²`, relative to `‖K‖²`.
pub fn step_margin(tau: f64, sigma: f64, l_h: f64, l_gstar: f64, norm_k: f64) -> f64 {
    ((1.0 / tau - l_h) * (1.0 / sigma - l_gstar) - norm_k * norm_k) / (norm_k * norm_k)
}

/// Primal and dual iterates as flat vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverState {
    pub width: usize,
    pub height: usize,
    pub m: usize,
    /// `[u]` or `[u; r_A; r_B]`.
    pub x: Vec<f64>,
    /// `[p_A, q_A, p_B, q_B, p_C.x, p_C.y]`.
    pub y: Vec<f64>,
    pub iter: usize,
}

impl SolverState {
    fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn u(&self) -> &[f64] {
        &self.x[..self.pixels()]
    }

    fn slack(&self, k: usize) -> Option<&[f64]> {
        let (n, mm) = (self.pixels(), self.m * self.m);
        (self.x.len() == n + 2 * mm).then(|| &self.x[n + k * mm..n + (k + 1) * mm])
    }

    /// Foreground transport slack, column-wise `M × M`.
    pub fn r_a(&self) -> Option<&[f64]> {
        self.slack(0)
    }

    pub fn r_b(&self) -> Option<&[f64]> {
        self.slack(1)
    }

    pub fn duals(&self) -> DualStack {
        DualStack::from_flat(&self.y, self.m, self.width, self.height).expect("sized at construction")
    }

    pub fn probability_map(&self) -> ProbabilityMap {
        ProbabilityMap { width: self.width, height: self.height, values: self.u().to_vec() }
    }
}

/// One diagnostics record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub iter: usize,
    pub residual: f64,
    /// Relaxed energy, `null` when energy tracking is off.
    pub energy: Option<f64>,
    pub elapsed_ms: f64,
}

/// Constraint violations of the final iterate.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Violations {
    /// `max(0, −min u, max u − 1)`.
    pub box_violation: f64,
    /// `max(0, max_x ‖p_C(x)‖ − ρ)`.
    pub ball_violation: f64,
    /// `max(0, −min r)` over both slacks.
    pub slack_negativity: f64,
    /// `‖Lᵀr_A − (Hu, Au)‖₁` for the slack backends.
    pub marginal_gap_fg: Option<f64>,
    /// `‖Lᵀr_B − (H(1−u), B(1−u))‖₁` for the slack backends.
    pub marginal_gap_bg: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub backend: Backend,
    pub tau: f64,
    pub sigma: f64,
    pub norm_k: f64,
    pub l_gstar: f64,
    pub iterations: usize,
    pub checkpoints: Vec<Checkpoint>,
    pub violations: Violations,
    /// Lambert W evaluations that took the overflow-safe path.
    pub clamp_events: usize,
    pub final_energy: Option<EnergyReport>,
    pub total_ms: f64,
}

impl Diagnostics {
    pub fn final_residual(&self) -> Option<f64> {
        self.checkpoints.last().map(|c| c.residual)
    }
}

/// Solver bound to one problem, with its step sizes and scratch space.
pub struct Solver<'a> {
    problem: &'a Problem,
    cfg: SolverConfig,
    op: SaddleOperator<'a>,
    conj: Option<NormalizedConjugate<'a>>,
    /// Constant part of `∇G*`.
    linear_grad: Vec<f64>,
    pub tau: f64,
    pub sigma: f64,
    pub norm_k: f64,
    pub l_gstar: f64,
    clamp_events: usize,
    kty: Vec<f64>,
    kx: Vec<f64>,
    gy: Vec<f64>,
    gy_after: Vec<f64>,
    x_bar: Vec<f64>,
}

impl<'a> Solver<'a> {
    pub fn new(problem: &'a Problem, cfg: SolverConfig) -> Result<Self> {
        cfg.validate()?;
        let m = problem.bins.m;
        let n = problem.pixels();
        let nf = n as f64;
        let op = SaddleOperator::new(&problem.bins, &problem.a, &problem.b, cfg.backend);
        let norm_k = op_norm(&op, cfg.norm_iters, cfg.seed)?;

        let pops = problem.bins.populations();
        let mut linear_grad = vec![0.0; op.output_len()];
        for i in 0..m {
            let h1 = pops[i] as f64;
            match cfg.backend {
                Backend::L1 => linear_grad[2 * m + i] = -(h1 - nf * problem.b.0[i]),
                _ => {
                    linear_grad[2 * m + i] = -h1;
                    linear_grad[3 * m + i] = -nf * problem.b.0[i];
                }
            }
        }

        let (conj, l_gstar) = match cfg.backend {
            Backend::SinkhornGrad => {
                let lambda = cfg.lambda.expect("validated");
                let norm_h = (pops.iter().copied().max().unwrap_or(0) as f64).sqrt();
                let norm_b = problem.b.l2_norm() * nf.sqrt();
                let l = 2.0 * lipschitz_bound(lambda, nf) + norm_h + norm_b;
                (Some(NormalizedConjugate::new(&problem.cost, lambda, nf)?), l)
            }
            _ => (None, 0.0),
        };
        let sigma = cfg.sigma.unwrap_or(1.0 / (l_gstar + cfg.step_balance * norm_k));
        let (tau, sigma) = step_sizes(0.0, l_gstar, norm_k, Some(sigma))?;
        let margin = step_margin(tau, sigma, 0.0, l_gstar, norm_k);
        if margin < -1e-9 {
            return Err(Error::StepSize(format!("certificate fails with relative margin {margin:e}")));
        }

        let (in_len, out_len) = (op.input_len(), op.output_len());
        Ok(Self {
            problem,
            cfg,
            op,
            conj,
            linear_grad,
            tau,
            sigma,
            norm_k,
            l_gstar,
            clamp_events: 0,
            kty: vec![0.0; in_len],
            kx: vec![0.0; out_len],
            gy: vec![0.0; out_len],
            gy_after: vec![0.0; out_len],
            x_bar: vec![0.0; in_len],
        })
    }

    pub fn config(&self) -> &SolverConfig {
        &self.cfg
    }

    pub fn operator(&self) -> &SaddleOperator<'a> {
        &self.op
    }

    /// `u ≡ 0.5`, zero duals and zero slacks.
    pub fn initial_state(&self) -> SolverState {
        let n = self.problem.pixels();
        let mut x = vec![0.0; self.op.input_len()];
        x[..n].iter_mut().for_each(|v| *v = 0.5);
        SolverState {
            width: self.problem.bins.width,
            height: self.problem.bins.height,
            m: self.problem.bins.m,
            x,
            y: vec![0.0; self.op.output_len()],
            iter: 0,
        }
    }

    /// Writes `∇G*(y)` into `out`.
    fn grad_gstar(conj: &mut Option<NormalizedConjugate<'a>>, linear: &[f64], m: usize, y: &[f64], out: &mut [f64]) -> Result<()> {
        out.copy_from_slice(linear);
        if let Some(conj) = conj.as_mut() {
            let mut tmp_u = vec![0.0; m];
            let mut tmp_v = vec![0.0; m];
            for block in [0, 2 * m] {
                conj.gradient_into(&y[block..block + m], &y[block + m..block + 2 * m], &mut tmp_u, &mut tmp_v)?;
                for i in 0..m {
                    out[block + i] += tmp_u[i];
                    out[block + m + i] += tmp_v[i];
                }
            }
        }
        Ok(())
    }

    /// Advances `state` by one iteration.
    pub fn step(&mut self, state: &mut SolverState) -> Result<()> {
        let n = self.problem.pixels();
        let m = self.problem.bins.m;
        let mm = m * m;
        let (tau, sigma) = (self.tau, self.sigma);
        let iter = state.iter + 1;

        // primal
        self.op.apply_adjoint(&state.y, &mut self.kty);
        self.x_bar.copy_from_slice(&state.x);
        for (xi, &g) in state.x[..n].iter_mut().zip(&self.kty[..n]) {
            *xi = (*xi - tau * g).clamp(0.0, 1.0);
        }
        match self.cfg.backend {
            Backend::ExactMk => {
                let c = &self.problem.cost.data;
                for k in 0..2 {
                    let r = &mut state.x[n + k * mm..n + (k + 1) * mm];
                    let g = &self.kty[n + k * mm..n + (k + 1) * mm];
                    for ((ri, &gi), &ci) in r.iter_mut().zip(g).zip(c) {
                        *ri = (*ri - tau * (gi + ci)).max(0.0);
                    }
                }
            }
            Backend::SinkhornProx => {
                let lambda = self.cfg.lambda.expect("validated");
                let nf = n as f64;
                for (ri, &gi) in state.x[n..].iter_mut().zip(&self.kty[n..]) {
                    *ri -= tau * gi;
                }
                let c = &self.problem.cost.data;
                for k in 0..2 {
                    let r = &mut state.x[n + k * mm..n + (k + 1) * mm];
                    self.clamp_events += prox_g_in_place(r, tau, c, lambda, nf);
                }
            }
            _ => {}
        }
        // x̄ = 2x⁺ − x, with x_bar holding the old x
        for (xb, &xn) in self.x_bar.iter_mut().zip(&state.x) {
            *xb = 2.0 * xn - *xb;
        }

        // dual
        self.op.apply(&self.x_bar, &mut self.kx);
        Self::grad_gstar(&mut self.conj, &self.linear_grad, m, &state.y, &mut self.gy)?;
        for ((yi, &kxi), &gi) in state.y.iter_mut().zip(&self.kx).zip(&self.gy) {
            *yi += sigma * (kxi - gi);
        }
        if self.cfg.backend == Backend::L1 {
            for i in 0..m {
                state.y[i] = state.y[i].clamp(-1.0, 1.0);
                state.y[m + i] = 0.0;
                state.y[2 * m + i] = state.y[2 * m + i].clamp(-1.0, 1.0);
                state.y[3 * m + i] = 0.0;
            }
        }
        let (px, py) = state.y[4 * m..].split_at_mut(n);
        project_ball(px, py, self.cfg.rho)?;

        state.iter = iter;
        if !state.x.iter().chain(&state.y).all(|v| v.is_finite()) {
            return Err(Error::SolverAbort { iter, reason: "non-finite value in the iterates".into() });
        }
        Ok(())
    }

    /// Primal-dual residual between two consecutive iterates:
    /// `‖(x−x⁺)/τ − Kᵀ(y−y⁺)‖ + ‖(y−y⁺)/σ − K(x−x⁺) − (∇G*(y) − ∇G*(y⁺))‖`.
    pub fn residual(&mut self, before: &SolverState, after: &SolverState) -> Result<f64> {
        let m = self.problem.bins.m;
        let dx: Vec<f64> = before.x.iter().zip(&after.x).map(|(a, b)| a - b).collect();
        let dy: Vec<f64> = before.y.iter().zip(&after.y).map(|(a, b)| a - b).collect();
        self.op.apply_adjoint(&dy, &mut self.kty);
        let primal: Vec<f64> = dx.iter().zip(&self.kty).map(|(d, k)| d / self.tau - k).collect();
        self.op.apply(&dx, &mut self.kx);
        Self::grad_gstar(&mut self.conj, &self.linear_grad, m, &before.y, &mut self.gy)?;
        Self::grad_gstar(&mut self.conj, &self.linear_grad, m, &after.y, &mut self.gy_after)?;
        let dual: Vec<f64> = (0..dy.len())
            .map(|i| dy[i] / self.sigma - self.kx[i] - (self.gy[i] - self.gy_after[i]))
            .collect();
        Ok(norm2(&primal) + norm2(&dual))
    }

    /// Constraint violations of `state`.
    pub fn violations(&self, state: &SolverState) -> Violations {
        let n = self.problem.pixels();
        let m = self.problem.bins.m;
        let u = state.u();
        let box_violation = u.iter().map(|&v| (-v).max(v - 1.0)).fold(0.0, f64::max);
        let (px, py) = state.y[4 * m..].split_at(n);
        let ball_violation = px.iter().zip(py).map(|(x, y)| x.hypot(*y) - self.cfg.rho).fold(0.0, f64::max);
        let mut out = Violations { box_violation, ball_violation, ..Default::default() };
        if let (Some(r_a), Some(r_b)) = (state.r_a(), state.r_b()) {
            out.slack_negativity = r_a.iter().chain(r_b).map(|&v| -v).fold(0.0, f64::max);
            let hu = crate::linops::apply_h(&self.problem.bins, u);
            let pops = self.problem.bins.populations();
            let mass: f64 = u.iter().sum();
            let rest = n as f64 - mass;
            let gap = |r: &[f64], rows: &[f64], cols: &[f64]| {
                let (rs, cs) = marginals(m, m, r);
                crate::transport::l1_gap(&rs, rows) + crate::transport::l1_gap(&cs, cols)
            };
            let au: Vec<f64> = self.problem.a.0.iter().map(|v| v * mass).collect();
            let hc: Vec<f64> = (0..m).map(|i| pops[i] as f64 - hu[i]).collect();
            let bc: Vec<f64> = self.problem.b.0.iter().map(|v| v * rest).collect();
            out.marginal_gap_fg = Some(gap(r_a, &hu, &au));
            out.marginal_gap_bg = Some(gap(r_b, &hc, &bc));
        }
        out
    }

    /// Runs the configured number of iterations, reporting every checkpoint to
    /// `observer`.
    pub fn run(&mut self, observer: &mut dyn FnMut(&Checkpoint, &SolverState)) -> Result<(SolverState, Diagnostics)> {
        let start = Instant::now();
        let mut state = self.initial_state();
        let mut before = state.clone();
        let mut checkpoints = Vec::with_capacity(self.cfg.max_iter / self.cfg.check_every);
        for k in 1..=self.cfg.max_iter {
            let check = k % self.cfg.check_every == 0;
            if check {
                before.x.copy_from_slice(&state.x);
                before.y.copy_from_slice(&state.y);
                before.iter = state.iter;
            }
            self.step(&mut state)?;
            if check {
                let residual = self.residual(&before, &state)?;
                let energy = if self.cfg.track_energy {
                    Some(relaxed_energy(&state.probability_map(), self.problem, &self.cfg)?.value)
                } else {
                    None
                };
                let cp = Checkpoint { iter: k, residual, energy, elapsed_ms: start.elapsed().as_secs_f64() * 1e3 };
                checkpoints.push(cp);
                observer(&cp, &state);
                if self.cfg.early_stop.is_some_and(|tol| residual < tol) {
                    break;
                }
            }
        }
        let final_energy = if self.cfg.track_energy {
            Some(relaxed_energy(&state.probability_map(), self.problem, &self.cfg)?)
        } else {
            None
        };
        let diagnostics = Diagnostics {
            backend: self.cfg.backend,
            tau: self.tau,
            sigma: self.sigma,
            norm_k: self.norm_k,
            l_gstar: self.l_gstar,
            iterations: state.iter,
            checkpoints,
            violations: self.violations(&state),
            clamp_events: self.clamp_events,
            final_energy,
            total_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        Ok((state, diagnostics))
    }
}

/// Solves `problem` and returns the relaxed segmentation.
pub fn solve(problem: &Problem, cfg: &SolverConfig) -> Result<(ProbabilityMap, Diagnostics)> {
    solve_with(problem, cfg, &mut |_, _| {})
}

/// [`solve`] with a checkpoint observer.
pub fn solve_with(
    problem: &Problem,
    cfg: &SolverConfig,
    observer: &mut dyn FnMut(&Checkpoint, &SolverState),
) -> Result<(ProbabilityMap, Diagnostics)> {
    let mut solver = Solver::new(problem, cfg.clone())?;
    let (state, diagnostics) = solver.run(observer)?;
    Ok((state.probability_map(), diagnostics))
}
