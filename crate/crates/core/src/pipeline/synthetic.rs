//! Synthetic two-color instances with known ground truth.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{RgbImage, ScribblePair};

pub const FOREGROUND_COLOR: [f64; 3] = [0.85, 0.25, 0.2];
pub const BACKGROUND_COLOR: [f64; 3] = [0.2, 0.35, 0.8];
/// Absent from both exemplars, closer to the foreground color.
pub const NOVEL_COLOR: [f64; 3] = [0.95, 0.55, 0.15];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub width: usize,
    pub height: usize,
    /// Standard deviation of the per-channel Gaussian noise.
    pub noise: f64,
    /// Width in pixels of each scribble stroke.
    pub stroke: usize,
    /// Add a patch of [`NOVEL_COLOR`] inside the background half.
    pub novel_patch: bool,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self { width: 128, height: 128, noise: 0.05, stroke: 10, novel_patch: false, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticInstance {
    pub image: RgbImage,
    pub scribbles: ScribblePair,
    /// Foreground is the left half.
    pub truth: Vec<bool>,
    /// Pixels of the novel-color patch (all false without one).
    pub novel: Vec<bool>,
}

/// Left half foreground, right half background, noisy colors and one vertical
/// stroke per region over the middle half of the height.
///
/// The novel patch sits in the upper right, clear of the background stroke;
/// it keeps the ground truth of its surroundings.
pub fn two_color(spec: &SyntheticSpec) -> Result<SyntheticInstance> {
    let (w, h) = (spec.width, spec.height);
    if w < 16 || h < 16 || spec.stroke == 0 || spec.stroke > w / 4 {
        return Err(Error::invalid(format!("synthetic image {w}x{h} with stroke {} is too small", spec.stroke)));
    }
    if !(spec.noise >= 0.0 && spec.noise.is_finite()) {
        return Err(Error::invalid("noise level must be non-negative"));
    }
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let patch_x = (3 * w / 4)..(15 * w / 16);
    let patch_y = (h / 10)..(h / 10 + 3 * w / 16);
    let in_patch = |x: usize, y: usize| spec.novel_patch && patch_x.contains(&x) && patch_y.contains(&y);

    let stroke_rows = (h / 4)..(3 * h / 4);
    let band = |center: usize| (center - spec.stroke / 2)..(center - spec.stroke / 2 + spec.stroke);
    let (fg_band, bg_band) = (band(w / 4), band(5 * w / 8));

    let n = w * h;
    let mut pixels = Vec::with_capacity(n);
    let mut truth = Vec::with_capacity(n);
    let mut novel = Vec::with_capacity(n);
    let mut fg = vec![false; n];
    let mut bg = vec![false; n];
    for y in 0..h {
        for x in 0..w {
            let left = x < w / 2;
            let patch = in_patch(x, y);
            let base = if patch {
                NOVEL_COLOR
            } else if left {
                FOREGROUND_COLOR
            } else {
                BACKGROUND_COLOR
            };
            pixels.push(base.map(|c| (c + noise.sample(&mut rng)).clamp(0.0, 1.0)));
            truth.push(left);
            novel.push(patch);
            let i = y * w + x;
            if stroke_rows.contains(&y) {
                fg[i] = fg_band.contains(&x);
                bg[i] = bg_band.contains(&x);
            }
        }
    }
    Ok(SyntheticInstance {
        image: RgbImage::new(w, h, pixels)?,
        scribbles: ScribblePair::new(w, h, fg, bg)?,
        truth,
        novel,
    })
}
