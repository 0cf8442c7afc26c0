//! Thresholding of the relaxed segmentation and threshold selection.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linops::ProbabilityMap;
use crate::solver::{binary_energy, EnergyReport, Problem, SolverConfig};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Relative energy difference under which two thresholds count as tied.
const TIE_TOLERANCE: f64 = 1e-9;

fn check_t(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("threshold must lie in [0,1], got {t}")));
    }
    Ok(())
}

/// `R_t(u) = {x : u(x) ≥ t}`.
pub fn threshold(u: &ProbabilityMap, t: f64) -> Result<Vec<bool>> {
    check_t(t)?;
    Ok(u.values.iter().map(|&v| v >= t).collect())
}

/// `0.1, 0.2, …, 0.9`.
pub fn default_grid() -> Vec<f64> {
    (1..10).map(|k| k as f64 / 10.0).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdChoice {
    pub t: f64,
    pub energy: EnergyReport,
}

/// Grid threshold minimizing the non-relaxed energy of `R_t(u)`.
///
/// Thresholds leaving one region empty are skipped. Ties go to the `t`
/// closest to 0.5.
pub fn select_threshold(u: &ProbabilityMap, problem: &Problem, cfg: &SolverConfig, grid: &[f64]) -> Result<ThresholdChoice> {
    if grid.is_empty() {
        return Err(Error::invalid("threshold grid is empty"));
    }
    let mut best: Option<ThresholdChoice> = None;
    for &t in grid {
        let mask = threshold(u, t)?;
        let Some(energy) = binary_energy(&mask, problem, cfg)? else {
            continue;
        };
        let replace = match &best {
            None => true,
            Some(b) => {
                let scale = b.energy.value.abs().max(energy.value.abs()).max(f64::MIN_POSITIVE);
                let diff = (energy.value - b.energy.value) / scale;
                if diff.abs() <= TIE_TOLERANCE {
                    (t - DEFAULT_THRESHOLD).abs() < (b.t - DEFAULT_THRESHOLD).abs()
                } else {
                    diff < 0.0
                }
            }
        };
        if replace {
            best = Some(ThresholdChoice { t, energy });
        }
    }
    best.ok_or_else(|| Error::invalid("every grid threshold leaves a region empty"))
}

/// Fraction of pixels on which two masks agree.
pub fn agreement(a: &[bool], b: &[bool]) -> f64 {
    assert_eq!(a.len(), b.len(), "masks of different size");
    if a.is_empty() {
        return 1.0;
    }
    a.iter().zip(b).filter(|(x, y)| x == y).count() as f64 / a.len() as f64
}

/// Number of 4-neighbour pixel pairs with different labels.
pub fn perimeter(mask: &[bool], width: usize, height: usize) -> usize {
    let mut count = 0;
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            if x + 1 < width && mask[i] != mask[i + 1] {
                count += 1;
            }
            if y + 1 < height && mask[i] != mask[i + width] {
                count += 1;
            }
        }
    }
    count
}
