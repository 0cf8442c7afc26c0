use otseg_core::features::{
    assign_bins, build_codebook, exemplar_histograms, extract_features, histogram_from_weights, kmeans,
    normalize_features, BinMap, FeatureImage, FeatureTransform, KMeansOptions, RgbImage, ScribblePair,
};
use otseg_core::linops::ProbabilityMap;
use proptest::prelude::*;

fn image() -> impl Strategy<Value = RgbImage> {
    (2usize..12, 2usize..12).prop_flat_map(|(w, h)| {
        prop::collection::vec(prop::array::uniform3(0.0f64..=1.0), w * h)
            .prop_map(move |px| RgbImage::new(w, h, px).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn normalized_features_stay_in_unit_cube(img in image()) {
        for transform in [FeatureTransform::IdentityRgb, FeatureTransform::GradientNorm] {
            let mut f = extract_features(&img, transform).unwrap();
            prop_assert_eq!(f.n, 3);
            prop_assert_eq!(f.pixel_count(), img.len());
            normalize_features(&mut f, transform);
            prop_assert!(f.data.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    /// Lloyd's objective never increases across assignment steps.
    #[test]
    fn kmeans_objective_is_monotone(img in image(), m in 2usize..5, seed in any::<u64>()) {
        let f = extract_features(&img, FeatureTransform::IdentityRgb).unwrap();
        match kmeans(&f.data, f.n, m, seed, KMeansOptions::default()) {
            Ok(run) => {
                for pair in run.objective.windows(2) {
                    prop_assert!(pair[1] <= pair[0] * (1.0 + 1e-12) + 1e-12, "{:?}", run.objective);
                }
                prop_assert_eq!(run.codebook.m, m);
            }
            Err(_) => {
                let distinct: std::collections::HashSet<[u64; 3]> =
                    img.pixels.iter().map(|p| p.map(f64::to_bits)).collect();
                prop_assert!(distinct.len() < m);
            }
        }
    }

    #[test]
    fn bins_are_nearest_centroids(img in image(), seed in any::<u64>()) {
        let f = extract_features(&img, FeatureTransform::IdentityRgb).unwrap();
        prop_assume!(f.pixel_count() >= 3);
        let Ok(cb) = build_codebook(&f.data, 3, 3, seed) else { return Ok(()) };
        let bins = assign_bins(&f, &cb).unwrap();
        for i in 0..f.pixel_count() {
            let d = |k: usize| -> f64 { cb.centroids[k].iter().zip(f.feature(i)).map(|(c, x)| (c - x) * (c - x)).sum() };
            let chosen = d(bins.bins[i] as usize);
            prop_assert!((0..3).all(|k| chosen <= d(k)));
        }
    }

    /// `⟨Hu,1⟩ = ⟨u,1⟩` and `H` is linear in the weights.
    #[test]
    fn weighted_histograms(bins in prop::collection::vec(0u32..4, 30), u in prop::collection::vec(0.0f64..=1.0, 30), v in prop::collection::vec(0.0f64..=1.0, 30)) {
        let map = BinMap::new(6, 5, 4, bins).unwrap();
        let hu = histogram_from_weights(&map, &ProbabilityMap::new(6, 5, u.clone()).unwrap()).unwrap();
        prop_assert!((hu.total() - u.iter().sum::<f64>()).abs() <= 1e-12);
        let sum: Vec<f64> = u.iter().zip(&v).map(|(a, b)| (a + b) / 2.0).collect();
        let hv = histogram_from_weights(&map, &ProbabilityMap::new(6, 5, v).unwrap()).unwrap();
        let hs = histogram_from_weights(&map, &ProbabilityMap::new(6, 5, sum).unwrap()).unwrap();
        for i in 0..4 {
            prop_assert!((hs.0[i] - (hu.0[i] + hv.0[i]) / 2.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn exemplars_are_positive_distributions(
        bins in prop::collection::vec(0u32..5, 40),
        labels in prop::collection::vec(0u8..3, 40),
        floor in 1e-12f64..1e-3,
    ) {
        prop_assume!(labels.contains(&1) && labels.contains(&2));
        let map = BinMap::new(8, 5, 5, bins.clone()).unwrap();
        let fg: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
        let bg: Vec<bool> = labels.iter().map(|&l| l == 2).collect();
        let (a, b) = exemplar_histograms(&map, &ScribblePair::new(8, 5, fg.clone(), bg).unwrap(), floor).unwrap();
        for h in [&a, &b] {
            prop_assert!((h.total() - 1.0).abs() <= 1e-12);
            prop_assert!(h.0.iter().all(|&v| v > 0.0));
        }
        // bins hit by the fg scribble keep their relative counts
        let mut counts = [0.0f64; 5];
        for (i, &on) in fg.iter().enumerate() {
            if on {
                counts[bins[i] as usize] += 1.0;
            }
        }
        let hit: Vec<usize> = (0..5).filter(|&k| counts[k] > 0.0).collect();
        for w in hit.windows(2) {
            prop_assert!((a.0[w[0]] / a.0[w[1]] - counts[w[0]] / counts[w[1]]).abs() <= 1e-9 * counts[w[0]] / counts[w[1]]);
        }
    }
}

#[test]
fn empty_scribbles_are_rejected() {
    let map = BinMap::new(2, 2, 2, vec![0, 1, 0, 1]).unwrap();
    let s = ScribblePair::new(2, 2, vec![true, false, false, false], vec![false; 4]).unwrap();
    assert!(exemplar_histograms(&map, &s, 1e-8).is_err());
    assert!(ScribblePair::new(2, 2, vec![true; 4], vec![true, false, false, false]).is_err());
}

#[test]
fn feature_buffers_are_validated() {
    assert!(FeatureImage::new(2, 2, 3, vec![0.0; 11]).is_err());
    assert!(FeatureImage::new(1, 1, 1, vec![f64::NAN]).is_err());
}
