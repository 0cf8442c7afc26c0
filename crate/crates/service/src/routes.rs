use std::convert::Infallible;
use std::sync::Arc;

use axum::extract::multipart::MultipartError;
use axum::extract::{DefaultBodyLimit, Multipart, Path, State};
use axum::http::{header, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::stream::{self, Stream, StreamExt};
use otseg_api::{JobEvent, JobParams, JobState, JobStatus, ARTIFACTS};

use crate::app::{App, LabelUpload, Upload};
use crate::jobs::Job;
use crate::ServiceError;

pub fn router(app: Arc<App>) -> Router {
    let limit = app.config().body_limit;
    Router::new()
        .route("/api/jobs", post(submit).get(list))
        .route("/api/jobs/{id}", get(status))
        .route("/api/jobs/{id}/events", get(events))
        .route("/api/jobs/{id}/result/{name}", get(result))
        .layer(DefaultBodyLimit::max(limit))
        .with_state(app)
}

fn multipart_error(e: MultipartError) -> ServiceError {
    if e.status() == StatusCode::PAYLOAD_TOO_LARGE {
        ServiceError::TooLarge(e.body_text())
    } else {
        ServiceError::BadRequest(e.body_text())
    }
}

async fn submit(State(app): State<Arc<App>>, mut form: Multipart) -> Result<Response, ServiceError> {
    let (mut image, mut scribbles, mut fg, mut bg, mut spec) = (None, None, None, None, None);
    while let Some(field) = form.next_field().await.map_err(multipart_error)? {
        let name = field.name().unwrap_or_default().to_string();
        let bytes = field.bytes().await.map_err(multipart_error)?.to_vec();
        let slot = match name.as_str() {
            "image" => &mut image,
            "scribbles" => &mut scribbles,
            "fg" => &mut fg,
            "bg" => &mut bg,
            "spec" => &mut spec,
            other => return Err(ServiceError::BadRequest(format!("unexpected form field `{other}`"))),
        };
        if slot.replace(bytes).is_some() {
            return Err(ServiceError::BadRequest(format!("form field `{name}` given twice")));
        }
    }
    let image = image.ok_or_else(|| ServiceError::BadRequest("missing `image` field".into()))?;
    let labels = match (scribbles, fg, bg) {
        (Some(s), None, None) => LabelUpload::Scribbles(s),
        (None, Some(fg), Some(bg)) => LabelUpload::Masks { fg, bg },
        _ => return Err(ServiceError::BadRequest("send either `scribbles` or both `fg` and `bg`".into())),
    };
    let params: JobParams = match spec {
        Some(bytes) => serde_json::from_slice(&bytes).map_err(|e| ServiceError::BadRequest(format!("spec: {e}")))?,
        None => JobParams::default(),
    };
    let submitted = app.submit(Upload { image, labels, params }).await?;
    Ok((StatusCode::ACCEPTED, Json(submitted)).into_response())
}

fn lookup(app: &App, id: &str) -> Result<Arc<Job>, ServiceError> {
    app.job(id).ok_or_else(|| ServiceError::NotFound(format!("no job `{id}`")))
}

async fn list(State(app): State<Arc<App>>) -> Json<Vec<JobStatus>> {
    Json(app.statuses())
}

async fn status(State(app): State<Arc<App>>, Path(id): Path<String>) -> Result<Json<JobStatus>, ServiceError> {
    Ok(Json(lookup(&app, &id)?.snapshot()))
}

fn to_sse(event: &JobEvent) -> Event {
    let data = match event {
        JobEvent::Checkpoint(cp) => serde_json::to_string(cp),
        JobEvent::Status(t) => serde_json::to_string(t),
    };
    Event::default().event(event.name()).data(data.expect("events serialize"))
}

/// Replays the history, then follows the job until its terminal event.
fn follow(job: Arc<Job>) -> impl Stream<Item = Result<Event, Infallible>> {
    stream::unfold((job, 0usize, false), |(job, next, finished)| async move {
        if finished {
            return None;
        }
        let (batch, done) = loop {
            let changed = job.changed();
            tokio::pin!(changed);
            // registered before reading, so a publish in between still wakes us
            changed.as_mut().enable();
            let (batch, done) = job.events_since(next);
            if !batch.is_empty() || done {
                break (batch, done);
            }
            changed.await;
        };
        let next = next + batch.len();
        let events: Vec<_> = batch.iter().map(|e| Ok(to_sse(e))).collect();
        Some((stream::iter(events), (job, next, done)))
    })
    .flatten()
}

async fn events(
    State(app): State<Arc<App>>,
    Path(id): Path<String>,
) -> Result<Sse<impl Stream<Item = Result<Event, Infallible>>>, ServiceError> {
    let job = lookup(&app, &id)?;
    Ok(Sse::new(follow(job)).keep_alive(KeepAlive::default()))
}

async fn result(State(app): State<Arc<App>>, Path((id, name)): Path<(String, String)>) -> Result<Response, ServiceError> {
    let job = lookup(&app, &id)?;
    if !ARTIFACTS.contains(&name.as_str()) {
        return Err(ServiceError::NotFound(format!("no artifact `{name}`; expected one of {ARTIFACTS:?}")));
    }
    let snapshot = job.snapshot();
    match snapshot.status {
        JobState::Done => {}
        JobState::Failed => {
            return Err(ServiceError::Conflict(format!(
                "job failed: {}",
                snapshot.error.unwrap_or_default()
            )))
        }
        other => return Err(ServiceError::Conflict(format!("job is {other}"))),
    }
    let bytes = tokio::fs::read(job.dir.join(&name)).await?;
    let mime = if name.ends_with(".png") { "image/png" } else { "application/json" };
    Ok(([(header::CONTENT_TYPE, mime)], bytes).into_response())
}
