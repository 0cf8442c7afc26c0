use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock};

use otseg_api::{JobParams, JobState, JobStatus, Submitted};
use otseg_core::pipeline::{io, segment, write_outputs};
use otseg_core::Error as CoreError;
use sha2::{Digest, Sha256};
use tokio::sync::mpsc;

use crate::jobs::{now_ms, Job, Labels, BG_FILE, FG_FILE, IMAGE_FILE, SCRIBBLES_FILE};
use crate::ServiceError;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub data_dir: PathBuf,
    /// Jobs allowed in the running state at once.
    pub workers: usize,
    /// Serve an earlier job's id for a submission with identical inputs.
    pub cache: bool,
    pub body_limit: usize,
}

impl ServiceConfig {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        Self { data_dir: data_dir.into(), workers: 1, cache: false, body_limit: otseg_api::DEFAULT_BODY_LIMIT }
    }
}

/// Uploaded label images.
pub enum LabelUpload {
    Scribbles(Vec<u8>),
    Masks { fg: Vec<u8>, bg: Vec<u8> },
}

pub struct Upload {
    pub image: Vec<u8>,
    pub labels: LabelUpload,
    pub params: JobParams,
}

pub struct App {
    cfg: ServiceConfig,
    jobs: RwLock<HashMap<String, Arc<Job>>>,
    by_hash: Mutex<HashMap<String, String>>,
    queue: mpsc::UnboundedSender<Arc<Job>>,
}

impl App {
    /// Opens the data directory, restores persisted jobs and starts the
    /// workers. Must run inside a Tokio runtime.
    ///
    /// Done and failed jobs are served again; queued jobs are queued again;
    /// jobs caught running by the previous shutdown are marked failed.
    pub fn open(cfg: ServiceConfig) -> Result<Arc<Self>, ServiceError> {
        if cfg.workers == 0 {
            return Err(ServiceError::Config("at least one worker is required".into()));
        }
        let jobs_dir = cfg.data_dir.join("jobs");
        std::fs::create_dir_all(&jobs_dir)?;

        let mut restored = Vec::new();
        for entry in std::fs::read_dir(&jobs_dir)? {
            let dir = entry?.path();
            if !dir.is_dir() {
                continue;
            }
            match Job::load(&dir) {
                Ok(job) => restored.push(job),
                Err(e) => tracing::warn!("skipping {}: {e}", dir.display()),
            }
        }
        restored.sort_by_key(|j| (j.snapshot().submitted_ms, j.id.clone()));

        let (tx, rx) = mpsc::unbounded_channel();
        let app = Arc::new(Self {
            cfg,
            jobs: RwLock::new(HashMap::new()),
            by_hash: Mutex::new(HashMap::new()),
            queue: tx,
        });
        for job in restored {
            if job.state() == JobState::Running {
                job.finish(Err(("interrupted by a service restart".into(), false)))?;
            }
            let job = Arc::new(job);
            app.register(job.clone());
            if job.state() == JobState::Queued {
                app.enqueue(job);
            }
        }

        let rx = Arc::new(tokio::sync::Mutex::new(rx));
        for _ in 0..app.cfg.workers {
            tokio::spawn(worker(app.clone(), rx.clone()));
        }
        Ok(app)
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.cfg
    }

    pub fn job(&self, id: &str) -> Option<Arc<Job>> {
        self.jobs.read().unwrap().get(id).cloned()
    }

    pub fn statuses(&self) -> Vec<JobStatus> {
        let mut all: Vec<JobStatus> = self.jobs.read().unwrap().values().map(|j| j.snapshot()).collect();
        all.sort_by_key(|s| (s.submitted_ms, s.id.clone()));
        all
    }

    fn register(&self, job: Arc<Job>) {
        if job.state() != JobState::Failed {
            self.by_hash.lock().unwrap().insert(job.input_hash.clone(), job.id.clone());
        }
        self.jobs.write().unwrap().insert(job.id.clone(), job);
    }

    fn enqueue(&self, job: Arc<Job>) {
        // the receiver lives as long as the workers, which never exit first
        let _ = self.queue.send(job);
    }

    /// Validates an upload, persists it and queues the job.
    pub async fn submit(&self, upload: Upload) -> Result<Submitted, ServiceError> {
        let labels = validate(&upload)?;
        let hash = input_hash(&upload);
        if self.cfg.cache {
            let existing = self.by_hash.lock().unwrap().get(&hash).cloned();
            if let Some(id) = existing.filter(|id| self.job(id).is_some_and(|j| j.state() != JobState::Failed)) {
                return Ok(Submitted { id, cached: true });
            }
        }

        let id = uuid::Uuid::new_v4().simple().to_string();
        let dir = self.cfg.data_dir.join("jobs").join(&id);
        tokio::fs::create_dir_all(&dir).await?;
        tokio::fs::write(dir.join(IMAGE_FILE), &upload.image).await?;
        match &upload.labels {
            LabelUpload::Scribbles(bytes) => tokio::fs::write(dir.join(SCRIBBLES_FILE), bytes).await?,
            LabelUpload::Masks { fg, bg } => {
                tokio::fs::write(dir.join(FG_FILE), fg).await?;
                tokio::fs::write(dir.join(BG_FILE), bg).await?;
            }
        }
        let status = JobStatus {
            id: id.clone(),
            status: JobState::Queued,
            iter: 0,
            max_iter: upload.params.iters,
            params: upload.params,
            error: None,
            solver_abort: false,
            submitted_ms: now_ms(),
            finished_ms: None,
        };
        let job = Arc::new(Job::new(dir, status, hash, labels, Vec::new()));
        job.persist()?;
        self.register(job.clone());
        self.enqueue(job);
        tracing::info!(job = %id, "queued");
        Ok(Submitted { id, cached: false })
    }
}

fn bad(e: CoreError) -> ServiceError {
    ServiceError::BadRequest(e.to_string())
}

fn validate(upload: &Upload) -> Result<Labels, ServiceError> {
    upload.params.validate().map_err(bad)?;
    let image = io::decode_rgb(&upload.image).map_err(|e| ServiceError::BadRequest(format!("image: {e}")))?;
    let size = (image.width, image.height);
    let (scribbles, labels) = match &upload.labels {
        LabelUpload::Scribbles(bytes) => (io::decode_scribbles(bytes, size).map_err(bad)?, Labels::Scribbles),
        LabelUpload::Masks { fg, bg } => (io::scribbles_from_masks(fg, bg, size).map_err(bad)?, Labels::Masks),
    };
    if scribbles.fg_count() == 0 || scribbles.bg_count() == 0 {
        return Err(ServiceError::BadRequest("both foreground and background need at least one labeled pixel".into()));
    }
    Ok(labels)
}

/// SHA-256 over the length-prefixed inputs and the parameters as JSON.
fn input_hash(upload: &Upload) -> String {
    let mut h = Sha256::new();
    let mut part = |bytes: &[u8]| {
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(bytes);
    };
    part(&upload.image);
    match &upload.labels {
        LabelUpload::Scribbles(s) => part(s),
        LabelUpload::Masks { fg, bg } => {
            part(fg);
            part(bg);
        }
    }
    part(&serde_json::to_vec(&upload.params).expect("params serialize"));
    hex::encode(h.finalize())
}

async fn worker(app: Arc<App>, rx: Arc<tokio::sync::Mutex<mpsc::UnboundedReceiver<Arc<Job>>>>) {
    loop {
        let Some(job) = rx.lock().await.recv().await else { return };
        if let Err(e) = job.start() {
            tracing::error!(job = %job.id, "cannot persist job state: {e}");
        }
        tracing::info!(job = %job.id, "running");
        let runner = job.clone();
        let result = match tokio::task::spawn_blocking(move || execute(&runner)).await {
            Ok(Ok(iterations)) => Ok(iterations),
            Ok(Err(e)) => Err((e.to_string(), e.is_solver_abort())),
            Err(e) => Err((format!("worker crashed: {e}"), false)),
        };
        if let Err((msg, _)) = &result {
            tracing::warn!(job = %job.id, "failed: {msg}");
            app.by_hash.lock().unwrap().remove(&job.input_hash);
        } else {
            tracing::info!(job = %job.id, "done");
        }
        if let Err(e) = job.finish(result) {
            tracing::error!(job = %job.id, "cannot persist job state: {e}");
        }
    }
}

fn execute(job: &Job) -> Result<usize, CoreError> {
    let spec = job.spec();
    let (image, scribbles) = spec.load_inputs()?;
    let seg = segment(&image, &scribbles, &spec.params, &mut |cp, _| job.publish(cp))?;
    write_outputs(&seg, &spec.out_dir)?;
    Ok(seg.diagnostics.iterations)
}
