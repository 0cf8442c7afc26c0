use otseg_core::linops::ProbabilityMap;
use otseg_core::pipeline::io::{
    decode_mask, decode_probability, decode_scribbles, encode_mask, encode_probability, encode_rgb, encode_scribbles,
};
use otseg_core::pipeline::{
    build_problem, default_grid, run_job, segment, select_threshold, synthetic, threshold, JobParams, JobSpec, Summary,
    MASK_FILE, PROBABILITY_FILE, SUMMARY_FILE,
};
use otseg_core::solver::Backend;
use otseg_core::Error;
use proptest::prelude::*;

fn map() -> impl Strategy<Value = ProbabilityMap> {
    (1usize..20, 1usize..20).prop_flat_map(|(w, h)| {
        prop::collection::vec(0.0f64..=1.0, w * h).prop_map(move |v| ProbabilityMap::new(w, h, v).unwrap())
    })
}

proptest! {
    #[test]
    fn probability_png_is_within_one_step(u in map()) {
        let back = decode_probability(&encode_probability(&u).unwrap()).unwrap();
        prop_assert_eq!((back.width, back.height), (u.width, u.height));
        for (a, b) in u.values.iter().zip(&back.values) {
            prop_assert!((a - b).abs() <= 1.0 / 65535.0);
        }
    }

    #[test]
    fn thresholds_are_nested(u in map(), t in 0.0f64..=1.0, dt in 0.0f64..=1.0) {
        let t2 = (t + dt).min(1.0);
        let low = threshold(&u, t).unwrap();
        let high = threshold(&u, t2).unwrap();
        prop_assert!(low.iter().zip(&high).all(|(l, h)| *l || !*h));
    }

    #[test]
    fn mask_png_round_trips(bits in prop::collection::vec(any::<bool>(), 1..200), w in 1usize..20) {
        let h = bits.len().div_ceil(w);
        let mut mask = bits.clone();
        mask.resize(w * h, false);
        let back = decode_mask(&encode_mask(&mask, w, h).unwrap(), (w, h)).unwrap();
        prop_assert_eq!(back, mask);
    }
}

#[test]
fn threshold_extremes() {
    let u = ProbabilityMap::constant(4, 3, 0.7);
    assert!(threshold(&u, 0.5).unwrap().iter().all(|&v| v));
    assert!(threshold(&u, 0.9).unwrap().iter().all(|&v| !v));
    assert!(threshold(&ProbabilityMap::constant(4, 3, 0.0), 0.0).unwrap().iter().all(|&v| v));
    assert!(threshold(&u, 1.5).is_err());
}

#[test]
fn scribbles_round_trip() {
    let inst = synthetic::two_color(&synthetic::SyntheticSpec { width: 32, height: 32, stroke: 4, ..Default::default() }).unwrap();
    let back = decode_scribbles(&encode_scribbles(&inst.scribbles).unwrap(), (32, 32)).unwrap();
    assert_eq!(back, inst.scribbles);
    assert!(matches!(decode_scribbles(&encode_scribbles(&inst.scribbles).unwrap(), (31, 32)), Err(Error::Scribbles(_))));
}

fn small() -> synthetic::SyntheticInstance {
    synthetic::two_color(&synthetic::SyntheticSpec { width: 48, height: 48, stroke: 6, ..Default::default() }).unwrap()
}

fn params() -> JobParams {
    JobParams { bins: 8, iters: 200, step_balance: 1000.0, ..Default::default() }
}

#[test]
fn threshold_selection() {
    let inst = small();
    let p = params();
    let seg = segment(&inst.image, &inst.scribbles, &p, &mut |_, _| {}).unwrap();
    let cfg = p.solver_config(seg.summary.lambda);
    // a binary map gives the same mask for every t in (0,1]: the tie goes to 0.5
    let binary = ProbabilityMap::new(48, 48, inst.truth.iter().map(|&v| v as u8 as f64).collect()).unwrap();
    assert_eq!(select_threshold(&binary, &seg.problem, &cfg, &default_grid()).unwrap().t, 0.5);
    assert_eq!(select_threshold(&seg.u, &seg.problem, &cfg, &[0.5]).unwrap().t, 0.5);
    assert_eq!(select_threshold(&seg.u, &seg.problem, &cfg, &default_grid()).unwrap().t, 0.5);
    // every region empty
    let flat = ProbabilityMap::constant(48, 48, 0.95);
    assert!(select_threshold(&flat, &seg.problem, &cfg, &[0.1, 0.9]).is_err());
    assert!(select_threshold(&seg.u, &seg.problem, &cfg, &[]).is_err());
}

#[test]
fn summary_json_round_trips() {
    let inst = small();
    let seg = segment(&inst.image, &inst.scribbles, &params(), &mut |_, _| {}).unwrap();
    let text = seg.summary_json().unwrap();
    let parsed: Summary = serde_json::from_slice(&text).unwrap();
    assert_eq!(parsed, seg.summary);
    let again: Summary = serde_json::from_slice(&serde_json::to_vec(&parsed).unwrap()).unwrap();
    assert_eq!(again, parsed);
}

#[test]
fn zero_threshold_selects_everything() {
    let inst = small();
    let seg = segment(&inst.image, &inst.scribbles, &JobParams { t: 0.0, ..params() }, &mut |_, _| {}).unwrap();
    assert!(seg.mask.iter().all(|&v| v));
    assert_eq!(seg.summary.foreground_pixels, 48 * 48);
    assert!(seg.summary.binary_energy.is_none());
}

#[test]
fn jobs_are_reproducible_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let inst = small();
    std::fs::write(dir.path().join("image.png"), encode_rgb(&inst.image).unwrap()).unwrap();
    std::fs::write(dir.path().join("scribbles.png"), encode_scribbles(&inst.scribbles).unwrap()).unwrap();
    let spec = |out: &str, backend| JobSpec {
        image: dir.path().join("image.png"),
        scribbles: Some(dir.path().join("scribbles.png")),
        fg: None,
        bg: None,
        params: JobParams { backend, seed: 4, ..params() },
        out_dir: dir.path().join(out),
    };
    for backend in Backend::ALL {
        let (first, _) = run_job(&spec("a", backend)).unwrap();
        run_job(&spec("b", backend)).unwrap();
        for file in [PROBABILITY_FILE, MASK_FILE] {
            let a = std::fs::read(dir.path().join("a").join(file)).unwrap();
            let b = std::fs::read(dir.path().join("b").join(file)).unwrap();
            assert!(a == b, "{backend} {file}");
        }
        let summary: Summary = serde_json::from_slice(&std::fs::read(dir.path().join("a").join(SUMMARY_FILE)).unwrap()).unwrap();
        assert_eq!(summary.iterations, 200);
        assert_eq!(summary.foreground_pixels, first.mask.iter().filter(|&&v| v).count());
    }
}

#[test]
fn bad_parameters_are_config_errors() {
    let inst = small();
    for bad in [
        JobParams { t: 1.5, ..params() },
        JobParams { bins: 1, ..params() },
        JobParams { cost: "manhattan".into(), ..params() },
        JobParams { rho: -1.0, ..params() },
        JobParams { lambda: Some(0.0), ..params() },
    ] {
        assert!(build_problem(&inst.image, &inst.scribbles, &bad).unwrap_err().is_config_error(), "{bad:?}");
    }
    assert!(serde_json::from_str::<JobParams>(r#"{"bogus": 1}"#).is_err());
    let p: JobParams = serde_json::from_str(r#"{"backend": "l1-baseline", "rho": 0.2}"#).unwrap();
    assert_eq!((p.backend, p.rho, p.bins), (Backend::L1, 0.2, 64));
}
