//! Job records, their on-disk layout and the progress history.
//!
//! Each job owns `<data-dir>/jobs/<id>/` holding the uploaded inputs,
//! `job.json` and, once done, the pipeline outputs.

use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use otseg_api::{JobEvent, JobParams, JobState, JobStatus, Terminal};
use otseg_core::pipeline::{JobSpec, DIAGNOSTICS_FILE};
use otseg_core::solver::Checkpoint;
use serde::{Deserialize, Serialize};
use tokio::sync::Notify;

pub(crate) const JOB_FILE: &str = "job.json";
pub(crate) const IMAGE_FILE: &str = "image.png";
pub(crate) const SCRIBBLES_FILE: &str = "scribbles.png";
pub(crate) const FG_FILE: &str = "fg.png";
pub(crate) const BG_FILE: &str = "bg.png";

pub(crate) fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

/// How the labels were uploaded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub(crate) enum Labels {
    Scribbles,
    Masks,
}

/// Contents of `job.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct JobFile {
    #[serde(flatten)]
    pub status: JobStatus,
    pub input_hash: String,
    pub labels: Labels,
}

struct Inner {
    status: JobStatus,
    history: Vec<JobEvent>,
}

pub struct Job {
    pub id: String,
    pub(crate) dir: PathBuf,
    pub(crate) input_hash: String,
    labels: Labels,
    inner: Mutex<Inner>,
    changed: Notify,
}

impl Job {
    pub(crate) fn new(dir: PathBuf, status: JobStatus, input_hash: String, labels: Labels, history: Vec<JobEvent>) -> Self {
        Self {
            id: status.id.clone(),
            dir,
            input_hash,
            labels,
            inner: Mutex::new(Inner { status, history }),
            changed: Notify::new(),
        }
    }

    /// Reads a persisted job back; the history is rebuilt from the
    /// diagnostics of finished jobs.
    pub(crate) fn load(dir: &Path) -> std::io::Result<Self> {
        let file: JobFile = serde_json::from_slice(&std::fs::read(dir.join(JOB_FILE))?)?;
        let mut history = Vec::new();
        if file.status.status == JobState::Done {
            let text = std::fs::read_to_string(dir.join(DIAGNOSTICS_FILE))?;
            for line in text.lines().filter(|l| !l.trim().is_empty()) {
                history.push(JobEvent::Checkpoint(serde_json::from_str::<Checkpoint>(line)?));
            }
        }
        if file.status.status.is_terminal() {
            history.push(terminal_event(&file.status));
        }
        Ok(Self::new(dir.to_path_buf(), file.status, file.input_hash, file.labels, history))
    }

    pub fn snapshot(&self) -> JobStatus {
        self.inner.lock().unwrap().status.clone()
    }

    pub fn state(&self) -> JobState {
        self.inner.lock().unwrap().status.status
    }

    pub(crate) fn params(&self) -> JobParams {
        self.inner.lock().unwrap().status.params.clone()
    }

    /// Events from index `from` on, and whether the history is complete.
    pub fn events_since(&self, from: usize) -> (Vec<JobEvent>, bool) {
        let inner = self.inner.lock().unwrap();
        let done = inner.history.last().is_some_and(JobEvent::is_terminal);
        (inner.history.get(from..).unwrap_or_default().to_vec(), done)
    }

    /// Resolves after the next published event.
    pub fn changed(&self) -> tokio::sync::futures::Notified<'_> {
        self.changed.notified()
    }

    pub(crate) fn spec(&self) -> JobSpec {
        let (scribbles, fg, bg) = match self.labels {
            Labels::Scribbles => (Some(self.dir.join(SCRIBBLES_FILE)), None, None),
            Labels::Masks => (None, Some(self.dir.join(FG_FILE)), Some(self.dir.join(BG_FILE))),
        };
        JobSpec { image: self.dir.join(IMAGE_FILE), scribbles, fg, bg, params: self.params(), out_dir: self.dir.clone() }
    }

    pub(crate) fn persist(&self) -> std::io::Result<()> {
        let file = JobFile { status: self.snapshot(), input_hash: self.input_hash.clone(), labels: self.labels };
        write_json_atomic(&self.dir.join(JOB_FILE), &file)
    }

    pub(crate) fn start(&self) -> std::io::Result<()> {
        {
            let mut inner = self.inner.lock().unwrap();
            debug_assert_eq!(inner.status.status, JobState::Queued);
            inner.status.status = JobState::Running;
        }
        self.persist()
    }

    pub(crate) fn publish(&self, cp: &Checkpoint) {
        {
            let mut inner = self.inner.lock().unwrap();
            if inner.status.status.is_terminal() {
                return;
            }
            inner.status.iter = inner.status.iter.max(cp.iter);
            inner.history.push(JobEvent::Checkpoint(*cp));
        }
        self.changed.notify_waiters();
    }

    pub(crate) fn finish(&self, result: Result<usize, (String, bool)>) -> std::io::Result<()> {
        {
            let mut inner = self.inner.lock().unwrap();
            if inner.status.status.is_terminal() {
                return Ok(());
            }
            let status = &mut inner.status;
            match result {
                Ok(iterations) => {
                    status.status = JobState::Done;
                    status.iter = status.iter.max(iterations);
                }
                Err((error, solver_abort)) => {
                    status.status = JobState::Failed;
                    status.error = Some(error);
                    status.solver_abort = solver_abort;
                }
            }
            status.finished_ms = Some(now_ms());
            let event = terminal_event(status);
            inner.history.push(event);
        }
        self.changed.notify_waiters();
        self.persist()
    }
}

fn terminal_event(status: &JobStatus) -> JobEvent {
    JobEvent::Status(Terminal { status: status.status, error: status.error.clone() })
}

pub(crate) fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> std::io::Result<()> {
    let tmp = path.with_extension("json.tmp");
    std::fs::write(&tmp, serde_json::to_vec_pretty(value)?)?;
    std::fs::rename(tmp, path)
}
