use otseg_core::features::{BinMap, Codebook, Histogram};
use otseg_core::linops::{LinearOperator, ProbabilityMap};
use otseg_core::pipeline::{agreement, build_problem, perimeter, synthetic, threshold, JobParams};
use otseg_core::solver::{
    relaxed_energy, solve, solve_with, step_margin, step_sizes, Backend, Problem, Solver, SolverConfig,
};
use otseg_core::transport::{cost_matrix, CostKind};
use proptest::prelude::*;

fn synthetic_problem(size: usize, bins: usize, noise: f64) -> (Problem, Vec<bool>) {
    let spec = synthetic::SyntheticSpec { width: size, height: size, stroke: size / 8, noise, ..Default::default() };
    let inst = synthetic::two_color(&spec).unwrap();
    let (problem, _, _) = build_problem(&inst.image, &inst.scribbles, &JobParams { bins, ..Default::default() }).unwrap();
    (problem, inst.truth)
}

fn config(problem: &Problem, backend: Backend) -> SolverConfig {
    SolverConfig {
        backend,
        lambda: backend.needs_lambda().then(|| 1000.0 / problem.cost.max()),
        track_energy: false,
        ..Default::default()
    }
}

fn random_problem(w: usize, h: usize, m: usize, bins: Vec<u32>, a: Vec<f64>, b: Vec<f64>) -> Problem {
    let norm = |v: Vec<f64>| {
        let s: f64 = v.iter().sum();
        Histogram(v.into_iter().map(|x| x / s).collect())
    };
    let centroids = (0..m).map(|k| vec![k as f64 / m as f64, (k * k % 7) as f64 / 7.0]).collect();
    let cost = cost_matrix(&Codebook::new(centroids).unwrap(), CostKind::Euclid { p: 1 }).unwrap();
    Problem::new(BinMap::new(w, h, m, bins).unwrap(), norm(a), norm(b), cost).unwrap()
}

fn problem_strategy() -> impl Strategy<Value = Problem> {
    (2usize..7, 2usize..7, 2usize..5).prop_flat_map(|(w, h, m)| {
        (
            prop::collection::vec(0..m as u32, w * h),
            prop::collection::vec(0.05f64..1.0, m),
            prop::collection::vec(0.05f64..1.0, m),
        )
            .prop_map(move |(bins, a, b)| random_problem(w, h, m, bins, a, b))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn step_rule_is_certified(l_h in 0.0f64..10.0, l_g in 0.0f64..1e5, norm_k in 0.1f64..100.0, frac in 0.01f64..0.99) {
        let (tau, sigma) = step_sizes(l_h, l_g, norm_k, None).unwrap();
        prop_assert!(step_margin(tau, sigma, l_h, l_g, norm_k) >= -1e-9);
        let explicit = frac / l_g.max(1e-300);
        if l_g > 0.0 {
            let (tau, sigma) = step_sizes(l_h, l_g, norm_k, Some(explicit)).unwrap();
            prop_assert_eq!(sigma, explicit);
            prop_assert!(step_margin(tau, sigma, l_h, l_g, norm_k) >= -1e-9);
            prop_assert!(step_sizes(l_h, l_g, norm_k, Some(1.0 / l_g)).is_err());
        }
    }

    /// Box, ball and orthant constraints hold after every iteration, the
    /// certificate holds at construction, and the L1 duals stay in [−1,1].
    #[test]
    fn iterates_stay_feasible(problem in problem_strategy(), rho in 0.0f64..1.0, s in 0.5f64..1000.0) {
        let m = problem.bins.m;
        for backend in Backend::ALL {
            let cfg = SolverConfig { rho, step_balance: s, ..config(&problem, backend) };
            let mut solver = Solver::new(&problem, cfg).unwrap();
            prop_assert!(step_margin(solver.tau, solver.sigma, 0.0, solver.l_gstar, solver.norm_k) >= -1e-9);
            let mut state = solver.initial_state();
            for _ in 0..40 {
                solver.step(&mut state).unwrap();
                let v = solver.violations(&state);
                prop_assert_eq!(v.box_violation, 0.0);
                prop_assert!(v.ball_violation <= 1e-12 * rho.max(1.0));
                prop_assert_eq!(v.slack_negativity, 0.0);
                if backend == Backend::L1 {
                    prop_assert!(state.y[..4 * m].iter().all(|p| p.abs() <= 1.0));
                    prop_assert!(state.y[m..2 * m].iter().chain(&state.y[3 * m..4 * m]).all(|&q| q == 0.0));
                }
            }
        }
    }

    #[test]
    fn residual_vanishes_at_a_fixed_point(problem in problem_strategy()) {
        for backend in Backend::ALL {
            let mut solver = Solver::new(&problem, config(&problem, backend)).unwrap();
            let mut state = solver.initial_state();
            for _ in 0..5 {
                solver.step(&mut state).unwrap();
            }
            prop_assert_eq!(solver.residual(&state, &state).unwrap(), 0.0);
        }
    }

    /// `(p_A, q_A) → (p_A + t, q_A − t)` lies in the kernel of `Kᵀ` and leaves
    /// `∇G*` unchanged: the next primal iterate and the residual are unaffected.
    #[test]
    fn dual_shift_is_invisible(problem in problem_strategy(), t in -5.0f64..5.0) {
        let m = problem.bins.m;
        for backend in [Backend::ExactMk, Backend::SinkhornGrad, Backend::SinkhornProx] {
            let mut solver = Solver::new(&problem, config(&problem, backend)).unwrap();
            let mut state = solver.initial_state();
            for _ in 0..3 {
                solver.step(&mut state).unwrap();
            }
            let mut shifted = state.clone();
            for i in 0..m {
                shifted.y[i] += t;
                shifted.y[m + i] -= t;
            }
            let mut kty = vec![0.0; solver.operator().input_len()];
            let mut kty_shifted = kty.clone();
            solver.operator().apply_adjoint(&state.y, &mut kty);
            solver.operator().apply_adjoint(&shifted.y, &mut kty_shifted);
            for (x, y) in kty.iter().zip(&kty_shifted) {
                prop_assert!((x - y).abs() <= 1e-9 * (1.0 + t.abs()));
            }
            let (mut a, mut b) = (state.clone(), shifted.clone());
            solver.step(&mut a).unwrap();
            solver.step(&mut b).unwrap();
            for (x, y) in a.x.iter().zip(&b.x) {
                prop_assert!((x - y).abs() <= 1e-9 * (1.0 + t.abs()));
            }
            let r = solver.residual(&state, &a).unwrap();
            let r_shifted = solver.residual(&shifted, &b).unwrap();
            prop_assert!((r - r_shifted).abs() <= 1e-6 * r.max(1.0), "{} vs {}", r, r_shifted);
        }
    }
}

#[test]
fn symmetric_exemplars_give_no_incentive_to_separate() {
    let (p, _) = synthetic_problem(32, 8, 0.05);
    let problem = Problem::new(p.bins.clone(), p.a.clone(), p.a.clone(), p.cost.clone()).unwrap();
    let cfg = SolverConfig { rho: 0.0, max_iter: 2000, ..config(&problem, Backend::L1) };
    let (u, _) = solve(&problem, &cfg).unwrap();
    let half = ProbabilityMap::constant(u.width, u.height, 0.5);
    let e = relaxed_energy(&u, &problem, &cfg).unwrap().value;
    let e_half = relaxed_energy(&half, &problem, &cfg).unwrap().value;
    assert!(e <= e_half + 1e-6, "{e} vs {e_half}");
}

#[test]
fn two_bins_recover_the_halves() {
    let (problem, truth) = synthetic_problem(64, 2, 0.05);
    for backend in Backend::ALL {
        // the boundary front is still moving at 500 iterations
        let cfg = SolverConfig { step_balance: 1000.0, max_iter: 3000, ..config(&problem, backend) };
        let (u, _) = solve(&problem, &cfg).unwrap();
        let acc = agreement(&threshold(&u, 0.5).unwrap(), &truth);
        assert!(acc >= 0.99, "{backend}: {acc}");
    }
}

#[test]
fn exact_slacks_become_transport_plans() {
    let (problem, _) = synthetic_problem(32, 4, 0.05);
    let cfg = SolverConfig { max_iter: 20_000, check_every: 1000, ..config(&problem, Backend::ExactMk) };
    let mut solver = Solver::new(&problem, cfg).unwrap();
    let (state, _) = solver.run(&mut |_, _| {}).unwrap();
    let v = solver.violations(&state);
    let mass: f64 = state.u().iter().sum();
    let rest = problem.pixels() as f64 - mass;
    assert!(v.marginal_gap_fg.unwrap() <= 1e-3 * mass, "{v:?}");
    assert!(v.marginal_gap_bg.unwrap() <= 1e-3 * rest, "{v:?}");
}

#[test]
fn residual_decreases_and_energy_improves() {
    let (problem, _) = synthetic_problem(64, 16, 0.05);
    for backend in Backend::ALL {
        let cfg = SolverConfig { step_balance: 1000.0, track_energy: true, ..config(&problem, backend) };
        let (u, diag) = solve(&problem, &cfg).unwrap();
        assert_eq!(diag.checkpoints.len(), cfg.max_iter / cfg.check_every);
        let at = |k: usize| diag.checkpoints.iter().find(|c| c.iter == k).unwrap().residual;
        assert!(at(500) < at(50), "{backend}: {} vs {}", at(500), at(50));
        let half = ProbabilityMap::constant(u.width, u.height, 0.5);
        let e_half = relaxed_energy(&half, &problem, &cfg).unwrap().value;
        let e = diag.final_energy.unwrap().value;
        assert!(e <= e_half, "{backend}: {e} vs {e_half}");
    }
}

#[test]
fn perimeter_shrinks_as_rho_doubles() {
    let spec = synthetic::SyntheticSpec { width: 64, height: 64, stroke: 8, noise: 0.3, seed: 5, ..Default::default() };
    let inst = synthetic::two_color(&spec).unwrap();
    let params = JobParams { bins: 16, ..Default::default() };
    let (problem, _, _) = build_problem(&inst.image, &inst.scribbles, &params).unwrap();
    for backend in Backend::ALL {
        let mut last = usize::MAX;
        let mut seen = Vec::new();
        for rho in [0.05, 0.1, 0.2] {
            let cfg = SolverConfig { rho, step_balance: 1000.0, ..config(&problem, backend) };
            let (u, _) = solve(&problem, &cfg).unwrap();
            let per = perimeter(&threshold(&u, 0.5).unwrap(), u.width, u.height);
            seen.push(per);
            assert!(per <= last, "{backend}: perimeters {seen:?}");
            last = per;
        }
    }
}

#[test]
fn diagnostics_are_deterministic() {
    let (problem, _) = synthetic_problem(32, 8, 0.05);
    for backend in Backend::ALL {
        let cfg = SolverConfig { track_energy: true, check_every: 25, max_iter: 200, ..config(&problem, backend) };
        let run = || {
            let mut states = Vec::new();
            let (u, diag) = solve_with(&problem, &cfg, &mut |cp, st| states.push((cp.iter, cp.residual, cp.energy, st.x.clone(), st.y.clone())))
                .unwrap();
            (u, diag.tau, diag.sigma, diag.norm_k, diag.violations, diag.final_energy, states)
        };
        let (a, b) = (run(), run());
        // wall-clock fields aside, everything must match bit for bit
        assert!(a == b, "{backend}");
    }
}
