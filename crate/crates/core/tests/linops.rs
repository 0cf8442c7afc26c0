use otseg_core::features::{BinMap, Histogram};
use otseg_core::linops::{
    apply_h, dot, norm2, op_norm, project_ball, project_box, total_variation, GradientOperator, LinearOperator,
    SegmentationOperator, OP_NORM_INFLATION,
};
use otseg_core::solver::{Backend, SaddleOperator};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
struct Grid {
    bins: BinMap,
    a: Histogram,
    b: Histogram,
}

fn normalized(raw: Vec<f64>) -> Histogram {
    let s: f64 = raw.iter().sum();
    Histogram(raw.into_iter().map(|v| v / s).collect())
}

fn grid() -> impl Strategy<Value = Grid> {
    (1usize..10, 1usize..10, 2usize..6).prop_flat_map(|(w, h, m)| {
        (
            prop::collection::vec(0..m as u32, w * h),
            prop::collection::vec(0.01f64..1.0, m),
            prop::collection::vec(0.01f64..1.0, m),
        )
            .prop_map(move |(bins, a, b)| Grid {
                bins: BinMap::new(w, h, m, bins).unwrap(),
                a: normalized(a),
                b: normalized(b),
            })
    })
}

fn vector(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn adjoint_gap(op: &dyn LinearOperator, seed: u64) -> f64 {
    let x = vector(op.input_len(), seed);
    let y = vector(op.output_len(), seed ^ 0xdead_beef);
    let mut kx = vec![0.0; op.output_len()];
    let mut kty = vec![0.0; op.input_len()];
    op.apply(&x, &mut kx);
    op.apply_adjoint(&y, &mut kty);
    let scale = (norm2(&kx) * norm2(&y)).max(norm2(&x) * norm2(&kty)).max(1e-300);
    (dot(&kx, &y) - dot(&x, &kty)).abs() / scale
}

proptest! {
    #[test]
    fn operators_are_adjoint(g in grid(), seed in any::<u64>()) {
        let (w, h) = (g.bins.width, g.bins.height);
        let grad = GradientOperator { width: w, height: h };
        prop_assert!(adjoint_gap(&grad, seed) <= 1e-12);
        prop_assert!(adjoint_gap(&SegmentationOperator::new(&g.bins, &g.a, &g.b).unwrap(), seed) <= 1e-12);
        for backend in Backend::ALL {
            let op = SaddleOperator::new(&g.bins, &g.a, &g.b, backend);
            prop_assert!(adjoint_gap(&op, seed) <= 1e-12, "{}", backend);
        }
    }

    /// The power-iteration estimate bounds every observed ratio `‖Kx‖/‖x‖`.
    #[test]
    fn op_norm_is_an_upper_estimate(g in grid(), seed in any::<u64>()) {
        let op = SegmentationOperator::new(&g.bins, &g.a, &g.b).unwrap();
        let est = op_norm(&op, 200, 1).unwrap();
        for k in 0..5 {
            let x = vector(op.input_len(), seed.wrapping_add(k));
            let mut kx = vec![0.0; op.output_len()];
            op.apply(&x, &mut kx);
            prop_assert!(norm2(&kx) <= est * norm2(&x) * (1.0 + 1e-9));
        }
        // ‖K‖² ≤ 2·max population + ‖a‖²N + ‖b‖²N + 8
        let pops = g.bins.populations();
        let n = g.bins.pixel_count() as f64;
        let bound = (2.0 * *pops.iter().max().unwrap() as f64 + (g.a.l2_norm().powi(2) + g.b.l2_norm().powi(2)) * n + 8.0).sqrt();
        prop_assert!(est / OP_NORM_INFLATION <= bound * (1.0 + 1e-9));
    }

    /// Every pixel lands in exactly one bin.
    #[test]
    fn h_preserves_mass_and_is_linear(g in grid(), seed in any::<u64>(), s in -3.0f64..3.0) {
        let n = g.bins.pixel_count();
        let u = vector(n, seed);
        let v = vector(n, seed.rotate_left(7));
        let hu = apply_h(&g.bins, &u);
        prop_assert!((hu.iter().sum::<f64>() - u.iter().sum::<f64>()).abs() <= 1e-12 * n as f64);
        let combo: Vec<f64> = u.iter().zip(&v).map(|(x, y)| x + s * y).collect();
        let hv = apply_h(&g.bins, &v);
        for (i, hc) in apply_h(&g.bins, &combo).iter().enumerate() {
            prop_assert!((hc - (hu[i] + s * hv[i])).abs() <= 1e-12 * n as f64);
        }
    }

    #[test]
    fn projections_are_idempotent_and_feasible(seed in any::<u64>(), rho in 0.0f64..2.0) {
        let mut u = vector(50, seed).into_iter().map(|v| 3.0 * v).collect::<Vec<_>>();
        project_box(&mut u);
        prop_assert!(u.iter().all(|v| (0.0..=1.0).contains(v)));
        let once = u.clone();
        project_box(&mut u);
        prop_assert_eq!(&once, &u);

        let mut px = vector(50, seed ^ 1);
        let mut py = vector(50, seed ^ 2);
        project_ball(&mut px, &mut py, rho).unwrap();
        prop_assert!(px.iter().zip(&py).all(|(x, y)| x.hypot(*y) <= rho * (1.0 + 1e-12)));
        let (qx, qy) = (px.clone(), py.clone());
        project_ball(&mut px, &mut py, rho).unwrap();
        for i in 0..50 {
            prop_assert!((px[i] - qx[i]).abs() <= 1e-15 && (py[i] - qy[i]).abs() <= 1e-15);
        }
    }

    /// TV is a seminorm that vanishes on constants.
    #[test]
    fn total_variation_seminorm(w in 1usize..12, h in 1usize..12, seed in any::<u64>(), c in -2.0f64..2.0, s in -3.0f64..3.0) {
        let u = vector(w * h, seed);
        let v = vector(w * h, seed ^ 99);
        prop_assert!(total_variation(w, h, &vec![c; w * h]).abs() <= 1e-12);
        let tu = total_variation(w, h, &u);
        let scaled: Vec<f64> = u.iter().map(|x| s * x).collect();
        prop_assert!((total_variation(w, h, &scaled) - s.abs() * tu).abs() <= 1e-9 * tu.max(1.0));
        let sum: Vec<f64> = u.iter().zip(&v).map(|(x, y)| x + y).collect();
        prop_assert!(total_variation(w, h, &sum) <= tu + total_variation(w, h, &v) + 1e-9);
    }
}
