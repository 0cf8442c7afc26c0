//! Feature transforms, K-means codebooks, hard bin assignment and histograms.
//!
//! Everything here realizes the histogram operator `H` (through a [`BinMap`])
//! and the two exemplar histograms `a` and `b` built from user scribbles.

use std::collections::HashSet;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linops::ProbabilityMap;

/// Default floor applied to empty exemplar bins before renormalization.
pub const DEFAULT_BIN_FLOOR: f64 = 1e-8;

/// Upper bound of a gradient-norm feature channel for colors in `[0,1]`.
const GRADIENT_NORM_MAX: f64 = std::f64::consts::SQRT_2;

/// An RGB image with channel values in `[0,1]`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[f64; 3]>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, pixels: Vec<[f64; 3]>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::dims(format!(
                "{} pixels for a {width}x{height} image",
                pixels.len()
            )));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }
}

/// Per-pixel feature vectors of dimension `n`, stored pixel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureImage {
    pub width: usize,
    pub height: usize,
    pub n: usize,
    pub data: Vec<f64>,
}

impl FeatureImage {
    pub fn new(width: usize, height: usize, n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * n {
            return Err(Error::dims(format!(
                "feature buffer of {} values for {width}x{height}x{n}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite feature value"));
        }
        Ok(Self { width, height, n, data })
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn feature(&self, pixel: usize) -> &[f64] {
        &self.data[pixel * self.n..(pixel + 1) * self.n]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureTransform {
    /// The color values themselves (`n = 3`).
    #[serde(alias = "rgb")]
    IdentityRgb,
    /// Per-channel norm of the forward-difference gradient (`n = 3`).
    #[serde(alias = "gradnorm")]
    GradientNorm,
}

impl FromStr for FeatureTransform {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rgb" | "identity-rgb" => Ok(Self::IdentityRgb),
            "gradnorm" | "gradient-norm" => Ok(Self::GradientNorm),
            other => Err(Error::invalid(format!("unknown feature transform `{other}`"))),
        }
    }
}

/// Computes the feature image of `image`.
///
/// Gradient-norm features use forward differences with a zero one-sided
/// difference on the right and bottom borders, the same stencil as the TV term.
pub fn extract_features(image: &RgbImage, transform: FeatureTransform) -> Result<FeatureImage> {
    if image.is_empty() {
        return Err(Error::invalid("empty image"));
    }
    let (w, h) = (image.width, image.height);
    let data = match transform {
        FeatureTransform::IdentityRgb => image.pixels.iter().flat_map(|p| p.iter().copied()).collect(),
        FeatureTransform::GradientNorm => {
            let mut data = Vec::with_capacity(w * h * 3);
            for y in 0..h {
                for x in 0..w {
                    let i = y * w + x;
                    let here = image.pixels[i];
                    for c in 0..3 {
                        let dx = if x + 1 < w { image.pixels[i + 1][c] - here[c] } else { 0.0 };
                        let dy = if y + 1 < h { image.pixels[i + w][c] - here[c] } else { 0.0 };
                        data.push(dx.hypot(dy));
                    }
                }
            }
            data
        }
    };
    FeatureImage::new(w, h, 3, data)
}

/// Rescales features to `[0,1]` per channel before clustering.
///
/// Colors already live in `[0,1]`; gradient norms of `[0,1]` colors are bounded
/// by `√2`, so they are divided by that bound. The rescaling does not depend on
/// the image content.
pub fn normalize_features(features: &mut FeatureImage, transform: FeatureTransform) {
    if transform == FeatureTransform::GradientNorm {
        for v in &mut features.data {
            *v = (*v / GRADIENT_NORM_MAX).clamp(0.0, 1.0);
        }
    }
}

/// `M` centroids of dimension `n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    #[serde(rename = "M")]
    pub m: usize,
    pub n: usize,
    pub centroids: Vec<Vec<f64>>,
}

impl Codebook {
    pub fn new(centroids: Vec<Vec<f64>>) -> Result<Self> {
        let m = centroids.len();
        if m < 2 {
            return Err(Error::invalid(format!("codebook needs at least 2 bins, got {m}")));
        }
        let n = centroids[0].len();
        if centroids.iter().any(|c| c.len() != n) {
            return Err(Error::dims("centroids of different dimensions"));
        }
        if centroids.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite centroid"));
        }
        Ok(Self { m, n, centroids })
    }

    /// Index of the nearest centroid; ties go to the smallest index.
    pub fn nearest(&self, feature: &[f64]) -> usize {
        nearest_centroid(&self.centroids, feature).0
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest_centroid(centroids: &[Vec<f64>], feature: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centroids.iter().enumerate() {
        let d = sq_dist(c, feature);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

/// Lloyd iteration controls.
#[derive(Debug, Clone, Copy)]
pub struct KMeansOptions {
    pub max_sweeps: usize,
    pub displacement_tol: f64,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        Self { max_sweeps: 100, displacement_tol: 1e-6 }
    }
}

/// Result of a K-means run: the codebook plus the objective after each
/// assignment step (useful to check monotonicity).
#[derive(Debug, Clone)]
pub struct KMeansRun {
    pub codebook: Codebook,
    pub objective: Vec<f64>,
    pub sweeps: usize,
}

/// Lloyd's K-means with k-means++ seeding on flat samples of dimension `n`.
///
/// Empty clusters are reseeded to the sample farthest from its current centroid.
pub fn kmeans(samples: &[f64], n: usize, m: usize, seed: u64, opts: KMeansOptions) -> Result<KMeansRun> {
    if n == 0 || samples.len() % n != 0 {
        return Err(Error::dims(format!("{} values are not a multiple of n={n}", samples.len())));
    }
    if m < 2 {
        return Err(Error::invalid(format!("need at least 2 clusters, got {m}")));
    }
    let count = samples.len() / n;
    let point = |i: usize| &samples[i * n..(i + 1) * n];

    let distinct: HashSet<Vec<u64>> =
        (0..count).map(|i| point(i).iter().map(|v| v.to_bits()).collect()).collect();
    if distinct.len() < m {
        return Err(Error::invalid(format!(
            "{} distinct samples cannot seed {m} clusters",
            distinct.len()
        )));
    }

    // k-means++ seeding
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids: Vec<Vec<f64>> = vec![point(rng.random_range(0..count)).to_vec()];
    let mut d2: Vec<f64> = (0..count).map(|i| sq_dist(point(i), &centroids[0])).collect();
    while centroids.len() < m {
        let total: f64 = d2.iter().sum();
        let mut target = rng.random::<f64>() * total;
        let mut pick = None;
        for (i, &d) in d2.iter().enumerate() {
            if d > 0.0 {
                pick = Some(i);
                if target < d {
                    break;
                }
                target -= d;
            }
        }
        let next = point(pick.expect("distinct samples remain")).to_vec();
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(point(i), &next));
        }
        centroids.push(next);
    }

    let mut assign = vec![0usize; count];
    let mut dist = vec![0f64; count];
    let mut objective = Vec::new();
    let mut sweeps = 0;
    while sweeps < opts.max_sweeps {
        sweeps += 1;
        assign
            .par_iter_mut()
            .zip(dist.par_iter_mut())
            .enumerate()
            .for_each(|(i, (a, d))| {
                let (k, dd) = nearest_centroid(&centroids, point(i));
                *a = k;
                *d = dd;
            });
        objective.push(dist.iter().sum());

        let mut sums = vec![vec![0.0; n]; m];
        let mut sizes = vec![0usize; m];
        for i in 0..count {
            let k = assign[i];
            sizes[k] += 1;
            for (s, v) in sums[k].iter_mut().zip(point(i)) {
                *s += v;
            }
        }
        let mut updated: Vec<Vec<f64>> = sums
            .into_iter()
            .zip(&sizes)
            .zip(&centroids)
            .map(|((s, &sz), old)| {
                if sz == 0 {
                    old.clone()
                } else {
                    s.into_iter().map(|v| v / sz as f64).collect()
                }
            })
            .collect();
        for k in 0..m {
            if sizes[k] == 0 {
                let far = (0..count)
                    .fold((0usize, -1.0f64), |best, i| if dist[i] > best.1 { (i, dist[i]) } else { best })
                    .0;
                updated[k] = point(far).to_vec();
                dist[far] = 0.0;
            }
        }
        let displacement = updated
            .iter()
            .zip(&centroids)
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = updated;
        if displacement < opts.displacement_tol {
            break;
        }
    }

    Ok(KMeansRun { codebook: Codebook::new(centroids)?, objective, sweeps })
}

/// Builds an `m`-bin codebook from feature samples (flat, dimension `n`).
pub fn build_codebook(samples: &[f64], n: usize, m: usize, seed: u64) -> Result<Codebook> {
    if samples.len() / n.max(1) < m {
        return Err(Error::invalid(format!(
            "{} samples cannot seed {m} clusters",
            samples.len() / n.max(1)
        )));
    }
    Ok(kmeans(samples, n, m, seed, KMeansOptions::default())?.codebook)
}

/// Hard assignment of every pixel to one of `m` bins.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinMap {
    pub width: usize,
    pub height: usize,
    pub m: usize,
    pub bins: Vec<u32>,
}

impl BinMap {
    pub fn new(width: usize, height: usize, m: usize, bins: Vec<u32>) -> Result<Self> {
        if bins.len() != width * height {
            return Err(Error::dims(format!("{} bins for {width}x{height}", bins.len())));
        }
        if let Some(b) = bins.iter().find(|&&b| b as usize >= m) {
            return Err(Error::invalid(format!("bin index {b} out of range for M={m}")));
        }
        Ok(Self { width, height, m, bins })
    }

    pub fn pixel_count(&self) -> usize {
        self.bins.len()
    }

    /// Pixel count per bin.
    pub fn populations(&self) -> Vec<usize> {
        let mut pop = vec![0; self.m];
        for &b in &self.bins {
            pop[b as usize] += 1;
        }
        pop
    }
}

/// Maps each pixel to its nearest centroid (ties to the smallest index).
pub fn assign_bins(features: &FeatureImage, codebook: &Codebook) -> Result<BinMap> {
    if features.n != codebook.n {
        return Err(Error::dims(format!(
            "feature dimension {} vs codebook dimension {}",
            features.n, codebook.n
        )));
    }
    let bins = (0..features.pixel_count())
        .into_par_iter()
        .map(|i| codebook.nearest(features.feature(i)) as u32)
        .collect();
    BinMap::new(features.width, features.height, codebook.m, bins)
}

/// Non-negative bin masses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Histogram(pub Vec<f64>);

impl Histogram {
    pub fn new(mass: Vec<f64>) -> Result<Self> {
        if mass.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::invalid("histogram mass must be finite and non-negative"));
        }
        Ok(Self(mass))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.0.iter().sum()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn l2_norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// `mass_i = Σ_{x: bin(x)=i} u(x)`: the weighted, unnormalized histogram.
pub fn histogram_from_weights(bins: &BinMap, u: &ProbabilityMap) -> Result<Histogram> {
    if bins.width != u.width || bins.height != u.height {
        return Err(Error::dims(format!(
            "bin map {}x{} vs map {}x{}",
            bins.width, bins.height, u.width, u.height
        )));
    }
    Ok(Histogram(crate::linops::apply_h(bins, &u.values)))
}

/// Foreground and background scribble masks over the pixel grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScribblePair {
    pub width: usize,
    pub height: usize,
    pub fg: Vec<bool>,
    pub bg: Vec<bool>,
}

impl ScribblePair {
    pub fn new(width: usize, height: usize, fg: Vec<bool>, bg: Vec<bool>) -> Result<Self> {
        let n = width * height;
        if fg.len() != n || bg.len() != n {
            return Err(Error::dims("scribble masks do not match the image grid"));
        }
        if fg.iter().zip(&bg).any(|(f, b)| *f && *b) {
            return Err(Error::Scribbles("a pixel carries both labels".into()));
        }
        Ok(Self { width, height, fg, bg })
    }

    pub fn fg_count(&self) -> usize {
        self.fg.iter().filter(|&&v| v).count()
    }

    pub fn bg_count(&self) -> usize {
        self.bg.iter().filter(|&&v| v).count()
    }
}

fn scribble_histogram(bins: &BinMap, mask: &[bool], floor: f64) -> Histogram {
    let mut mass = vec![0.0; bins.m];
    for (&b, _) in bins.bins.iter().zip(mask).filter(|(_, &on)| on) {
        mass[b as usize] += 1.0;
    }
    let count: f64 = mass.iter().sum();
    for v in &mut mass {
        *v /= count;
        if *v == 0.0 {
            *v = floor;
        }
    }
    let total: f64 = mass.iter().sum();
    mass.iter_mut().for_each(|v| *v /= total);
    Histogram(mass)
}

/// Normalized exemplar histograms `(a, b)` of the foreground and background
/// scribbles. Empty bins are floored to `floor` and the result renormalized.
pub fn exemplar_histograms(bins: &BinMap, scribbles: &ScribblePair, floor: f64) -> Result<(Histogram, Histogram)> {
    if bins.width != scribbles.width || bins.height != scribbles.height {
        return Err(Error::dims("scribbles and bin map differ in size"));
    }
    if !(floor >= 0.0 && floor.is_finite()) {
        return Err(Error::invalid(format!("bin floor must be non-negative, got {floor}")));
    }
    if scribbles.fg_count() == 0 {
        return Err(Error::Scribbles("foreground scribble mask is empty".into()));
    }
    if scribbles.bg_count() == 0 {
        return Err(Error::Scribbles("background scribble mask is empty".into()));
    }
    Ok((
        scribble_histogram(bins, &scribbles.fg, floor),
        scribble_histogram(bins, &scribbles.bg, floor),
    ))
}
