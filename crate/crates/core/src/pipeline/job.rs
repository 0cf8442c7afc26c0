//! End-to-end segmentation jobs.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::io;
use super::threshold::{default_grid, select_threshold, threshold, DEFAULT_THRESHOLD};
use crate::error::{Error, Result};
use crate::features::{
    assign_bins, build_codebook, exemplar_histograms, extract_features, normalize_features, Codebook,
    FeatureTransform, RgbImage, ScribblePair, DEFAULT_BIN_FLOOR,
};
use crate::linops::ProbabilityMap;
use crate::solver::{
    binary_energy, solve_with, Backend, Checkpoint, Diagnostics, EnergyReport, Problem, SolverConfig, SolverState,
    Violations,
};
use crate::transport::{cost_matrix, CostKind};

/// `λ·max(C)` used when a Sinkhorn backend runs without an explicit `λ`.
pub const DEFAULT_LAMBDA_SCALE: f64 = 1000.0;

/// Tunable parameters of a job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JobParams {
    pub features: FeatureTransform,
    /// Codebook size `M`.
    pub bins: usize,
    /// `euclid1`, `euclid2` or `cexp`.
    pub cost: String,
    pub gamma: f64,
    pub backend: Backend,
    pub rho: f64,
    /// Defaults to `1000/max(C)` for the Sinkhorn backends.
    pub lambda: Option<f64>,
    pub t: f64,
    pub select_t: bool,
    pub iters: usize,
    pub seed: u64,
    pub check_every: usize,
    pub sigma: Option<f64>,
    pub step_balance: f64,
}

impl Default for JobParams {
    fn default() -> Self {
        Self {
            features: FeatureTransform::IdentityRgb,
            bins: 64,
            cost: "euclid1".into(),
            gamma: 1.0,
            backend: Backend::SinkhornProx,
            rho: 0.1,
            lambda: None,
            t: DEFAULT_THRESHOLD,
            select_t: false,
            iters: 500,
            seed: 0,
            check_every: 10,
            sigma: None,
            step_balance: 1.0,
        }
    }
}

impl JobParams {
    pub fn cost_kind(&self) -> Result<CostKind> {
        let kind = CostKind::from_name(&self.cost, self.gamma)?;
        kind.validate()?;
        Ok(kind)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.t) {
            return Err(Error::invalid(format!("threshold must lie in [0,1], got {}", self.t)));
        }
        if self.bins < 2 {
            return Err(Error::invalid(format!("need at least 2 bins, got {}", self.bins)));
        }
        if self.iters == 0 {
            return Err(Error::invalid("iteration count must be positive"));
        }
        self.cost_kind()?;
        if let Some(l) = self.lambda {
            if !(l > 0.0 && l.is_finite()) {
                return Err(Error::invalid(format!("lambda must be positive and finite, got {l}")));
            }
        }
        self.solver_config(None).validate_shape()
    }

    /// Solver configuration, with `lambda` resolved for the Sinkhorn backends.
    pub fn solver_config(&self, lambda: Option<f64>) -> SolverConfig {
        SolverConfig {
            rho: self.rho,
            lambda: if self.backend.needs_lambda() { lambda.or(self.lambda) } else { None },
            backend: self.backend,
            max_iter: self.iters,
            sigma: self.sigma,
            step_balance: self.step_balance,
            check_every: self.check_every,
            seed: self.seed,
            ..SolverConfig::default()
        }
    }
}

impl SolverConfig {
    /// Checks everything except the Sinkhorn `λ`, which may still be defaulted.
    fn validate_shape(&self) -> Result<()> {
        let mut probe = self.clone();
        if probe.backend.needs_lambda() && probe.lambda.is_none() {
            probe.lambda = Some(1.0);
        }
        probe.validate()
    }
}

/// A job described by files on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobSpec {
    pub image: PathBuf,
    /// Red/green scribble image.
    pub scribbles: Option<PathBuf>,
    /// Separate foreground and background masks.
    pub fg: Option<PathBuf>,
    pub bg: Option<PathBuf>,
    pub params: JobParams,
    pub out_dir: PathBuf,
}

impl JobSpec {
    pub fn load_inputs(&self) -> Result<(RgbImage, ScribblePair)> {
        self.params.validate()?;
        let image = io::read_rgb(&self.image)?;
        let size = (image.width, image.height);
        let scribbles = match (&self.scribbles, &self.fg, &self.bg) {
            (Some(path), None, None) => io::read_scribbles(path, size)?,
            (None, Some(fg), Some(bg)) => {
                let read = |p: &Path| std::fs::read(p).map_err(|e| Error::Image { path: p.into(), reason: e.to_string() });
                io::scribbles_from_masks(&read(fg)?, &read(bg)?, size)?
            }
            _ => {
                return Err(Error::Scribbles(
                    "give either a red/green scribble image or both --fg and --bg masks".into(),
                ))
            }
        };
        Ok((image, scribbles))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub features_ms: f64,
    pub codebook_ms: f64,
    pub solve_ms: f64,
    pub threshold_ms: f64,
    pub total_ms: f64,
}

/// The JSON summary written next to the outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub params: JobParams,
    pub width: usize,
    pub height: usize,
    /// `λ` actually used (`null` for the exact and L1 backends).
    pub lambda: Option<f64>,
    pub t: f64,
    pub foreground_pixels: usize,
    pub iterations: usize,
    pub final_residual: Option<f64>,
    pub relaxed_energy: Option<EnergyReport>,
    pub binary_energy: Option<EnergyReport>,
    pub tau: f64,
    pub sigma: f64,
    pub norm_k: f64,
    pub l_gstar: f64,
    pub violations: Violations,
    pub clamp_events: usize,
    pub timings: Timings,
}

/// Everything a job produces, in memory.
#[derive(Debug, Clone)]
pub struct Segmentation {
    pub u: ProbabilityMap,
    pub mask: Vec<bool>,
    pub codebook: Codebook,
    pub problem: Problem,
    pub diagnostics: Diagnostics,
    pub summary: Summary,
}

impl Segmentation {
    pub fn probability_png(&self) -> Result<Vec<u8>> {
        io::encode_probability(&self.u)
    }

    pub fn mask_png(&self) -> Result<Vec<u8>> {
        io::encode_mask(&self.mask, self.u.width, self.u.height)
    }

    pub fn summary_json(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec_pretty(&self.summary)?)
    }

    /// One `{iter, residual, energy, elapsed_ms}` record per line.
    pub fn diagnostics_jsonl(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for cp in &self.diagnostics.checkpoints {
            serde_json::to_writer(&mut out, cp)?;
            out.push(b'\n');
        }
        Ok(out)
    }
}

fn ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e3
}

/// Builds the segmentation problem: features, codebook, bins, exemplars, cost.
pub fn build_problem(image: &RgbImage, scribbles: &ScribblePair, params: &JobParams) -> Result<(Problem, Codebook, Timings)> {
    params.validate()?;
    if (scribbles.width, scribbles.height) != (image.width, image.height) {
        return Err(Error::Scribbles("scribbles and image differ in size".into()));
    }
    let mut timings = Timings::default();
    let start = Instant::now();
    let mut features = extract_features(image, params.features)?;
    normalize_features(&mut features, params.features);
    timings.features_ms = ms(start);

    let start = Instant::now();
    let codebook = build_codebook(&features.data, features.n, params.bins, params.seed)?;
    let bins = assign_bins(&features, &codebook)?;
    timings.codebook_ms = ms(start);

    let (a, b) = exemplar_histograms(&bins, scribbles, DEFAULT_BIN_FLOOR)?;
    let cost = cost_matrix(&codebook, params.cost_kind()?)?;
    Ok((Problem::new(bins, a, b, cost)?, codebook, timings))
}

/// Runs a job on decoded inputs, reporting checkpoints to `observer`.
pub fn segment(
    image: &RgbImage,
    scribbles: &ScribblePair,
    params: &JobParams,
    observer: &mut dyn FnMut(&Checkpoint, &SolverState),
) -> Result<Segmentation> {
    let total = Instant::now();
    let (problem, codebook, mut timings) = build_problem(image, scribbles, params)?;

    let lambda = params.backend.needs_lambda().then(|| {
        params.lambda.unwrap_or_else(|| DEFAULT_LAMBDA_SCALE / problem.cost.max().max(f64::MIN_POSITIVE))
    });
    let cfg = params.solver_config(lambda);

    let start = Instant::now();
    let (u, diagnostics) = solve_with(&problem, &cfg, observer)?;
    timings.solve_ms = ms(start);

    let start = Instant::now();
    let t = if params.select_t {
        select_threshold(&u, &problem, &cfg, &default_grid())?.t
    } else {
        params.t
    };
    let mask = threshold(&u, t)?;
    let binary = binary_energy(&mask, &problem, &cfg)?;
    timings.threshold_ms = ms(start);
    timings.total_ms = ms(total);

    let summary = Summary {
        params: params.clone(),
        width: u.width,
        height: u.height,
        lambda,
        t,
        foreground_pixels: mask.iter().filter(|&&v| v).count(),
        iterations: diagnostics.iterations,
        final_residual: diagnostics.final_residual(),
        relaxed_energy: diagnostics.final_energy,
        binary_energy: binary,
        tau: diagnostics.tau,
        sigma: diagnostics.sigma,
        norm_k: diagnostics.norm_k,
        l_gstar: diagnostics.l_gstar,
        violations: diagnostics.violations,
        clamp_events: diagnostics.clamp_events,
        timings,
    };
    Ok(Segmentation { u, mask, codebook, problem, diagnostics, summary })
}

/// Output file names inside a job's output directory.
pub const PROBABILITY_FILE: &str = "u.png";
pub const MASK_FILE: &str = "mask.png";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobOutputs {
    pub probability: PathBuf,
    pub mask: PathBuf,
    pub diagnostics: PathBuf,
    pub summary: PathBuf,
}

/// Writes the four output files of `seg` into `dir`.
pub fn write_outputs(seg: &Segmentation, dir: &Path) -> Result<JobOutputs> {
    std::fs::create_dir_all(dir)?;
    let outputs = JobOutputs {
        probability: dir.join(PROBABILITY_FILE),
        mask: dir.join(MASK_FILE),
        diagnostics: dir.join(DIAGNOSTICS_FILE),
        summary: dir.join(SUMMARY_FILE),
    };
    std::fs::write(&outputs.probability, seg.probability_png()?)?;
    std::fs::write(&outputs.mask, seg.mask_png()?)?;
    std::fs::write(&outputs.diagnostics, seg.diagnostics_jsonl()?)?;
    std::fs::write(&outputs.summary, seg.summary_json()?)?;
    Ok(outputs)
}

/// Reads the inputs of `spec`, segments, and writes the outputs.
pub fn run_job(spec: &JobSpec) -> Result<(Segmentation, JobOutputs)> {
    let (image, scribbles) = spec.load_inputs()?;
    let seg = segment(&image, &scribbles, &spec.params, &mut |_, _| {})?;
    let outputs = write_outputs(&seg, &spec.out_dir)?;
    Ok((seg, outputs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn params_validation() {
        assert!(JobParams::default().validate().is_ok());
        assert!(JobParams { t: 1.5, ..Default::default() }.validate().is_err());
        assert!(JobParams { cost: "manhattan".into(), ..Default::default() }.validate().is_err());
        assert!(JobParams { lambda: Some(-1.0), ..Default::default() }.validate().is_err());
        assert!(JobParams { bins: 1, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn params_json_defaults_and_unknown_fields() {
        let p: JobParams = serde_json::from_str(r#"{"backend":"l1","bins":8}"#).unwrap();
        assert_eq!(p.backend, Backend::L1);
        assert_eq!(p.bins, 8);
        assert_eq!(p.rho, 0.1);
        assert!(serde_json::from_str::<JobParams>(r#"{"bogus":1}"#).is_err());
    }
}
