//! Image and scribble ingestion, end-to-end jobs, thresholding and outputs.

pub mod io;
mod job;
pub mod synthetic;
mod threshold;

pub use job::{
    build_problem, run_job, segment, write_outputs, JobOutputs, JobParams, JobSpec, Segmentation, Summary, Timings,
    DEFAULT_LAMBDA_SCALE, DIAGNOSTICS_FILE, MASK_FILE, PROBABILITY_FILE, SUMMARY_FILE,
};
pub use threshold::{agreement, default_grid, perimeter, select_threshold, threshold, ThresholdChoice, DEFAULT_THRESHOLD};
