//! JSON shapes of the job service API.
//!
//! `POST /api/jobs` takes a multipart body with an `image` PNG, either a
//! `scribbles` PNG (pure red foreground, pure green background) or `fg` and
//! `bg` mask PNGs, and an optional `spec` part holding [`JobParams`] as JSON.

use serde::{Deserialize, Serialize};

pub use otseg_core::pipeline::JobParams;
pub use otseg_core::solver::Checkpoint;

/// Largest accepted request body.
pub const DEFAULT_BODY_LIMIT: usize = 16 * 1024 * 1024;

/// Result files served by `GET /api/jobs/{id}/result/{name}`.
pub const ARTIFACTS: [&str; 3] = ["u.png", "mask.png", "summary.json"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobState {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Done | JobState::Failed)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            JobState::Queued => "queued",
            JobState::Running => "running",
            JobState::Done => "done",
            JobState::Failed => "failed",
        }
    }
}

impl std::fmt::Display for JobState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Reply to a successful submission.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Submitted {
    pub id: String,
    /// True when `--cache` matched an earlier job with the same inputs.
    #[serde(default)]
    pub cached: bool,
}

/// `GET /api/jobs/{id}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobStatus {
    pub id: String,
    pub status: JobState,
    /// Iterations completed so far.
    pub iter: usize,
    pub max_iter: usize,
    pub params: JobParams,
    /// Set once the job has failed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Whether the failure came from the numerics rather than the inputs.
    #[serde(default)]
    pub solver_abort: bool,
    /// Milliseconds since the Unix epoch.
    pub submitted_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finished_ms: Option<u64>,
}

/// Payload of the terminal `status` event of the progress stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Terminal {
    pub status: JobState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// One server-sent event: `checkpoint` events carry `{iter, residual,
/// energy}`, the final `status` event carries the terminal state.
#[derive(Debug, Clone, PartialEq)]
pub enum JobEvent {
    Checkpoint(Checkpoint),
    Status(Terminal),
}

impl JobEvent {
    pub const CHECKPOINT: &'static str = "checkpoint";
    pub const STATUS: &'static str = "status";

    pub fn name(&self) -> &'static str {
        match self {
            JobEvent::Checkpoint(_) => Self::CHECKPOINT,
            JobEvent::Status(_) => Self::STATUS,
        }
    }

    pub fn is_terminal(&self) -> bool {
        matches!(self, JobEvent::Status(_))
    }
}

/// Body of every non-2xx reply.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}
