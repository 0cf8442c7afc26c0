//! Async client for the otseg job service.

use futures::stream::{self, Stream, StreamExt};
use otseg_api::{Checkpoint, ErrorBody, JobEvent, JobParams, JobStatus, Submitted, Terminal};
use reqwest::multipart::{Form, Part};
use reqwest::{Response, StatusCode};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// The service replied with a non-2xx status.
    #[error("{code}: {message}")]
    Status { code: StatusCode, message: String },
    #[error(transparent)]
    Http(#[from] reqwest::Error),
    #[error("malformed event `{name}`: {reason}")]
    Event { name: String, reason: String },
    #[error("event stream ended before the job finished")]
    Truncated,
}

impl Error {
    pub fn status(&self) -> Option<StatusCode> {
        match self {
            Error::Status { code, .. } => Some(*code),
            _ => None,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

/// Label images for a submission.
#[derive(Debug, Clone)]
pub enum Labels {
    /// One PNG, pure red foreground and pure green background.
    Scribbles(Vec<u8>),
    /// Two binary masks.
    Masks { fg: Vec<u8>, bg: Vec<u8> },
}

#[derive(Debug, Clone)]
pub struct Client {
    base: String,
    http: reqwest::Client,
}

fn png(name: &'static str, bytes: Vec<u8>) -> Part {
    Part::bytes(bytes).file_name(format!("{name}.png")).mime_str("image/png").expect("valid mime")
}

async fn check(resp: Response) -> Result<Response> {
    let code = resp.status();
    if code.is_success() {
        return Ok(resp);
    }
    let text = resp.text().await.unwrap_or_default();
    let message = serde_json::from_str::<ErrorBody>(&text).map(|b| b.error).unwrap_or(text);
    Err(Error::Status { code, message })
}

impl Client {
    /// `base` is the service root, e.g. `http://127.0.0.1:8787`.
    pub fn new(base: impl Into<String>) -> Self {
        Self { base: base.into().trim_end_matches('/').to_string(), http: reqwest::Client::new() }
    }

    fn url(&self, path: &str) -> String {
        format!("{}/api/jobs{path}", self.base)
    }

    pub async fn submit(&self, image: Vec<u8>, labels: Labels, params: &JobParams) -> Result<Submitted> {
        let spec = serde_json::to_string(params).expect("params serialize");
        self.submit_raw(image, labels, Some(spec)).await
    }

    /// Like [`Client::submit`] with the `spec` part passed through verbatim.
    pub async fn submit_raw(&self, image: Vec<u8>, labels: Labels, spec: Option<String>) -> Result<Submitted> {
        let mut form = Form::new().part("image", png("image", image));
        form = match labels {
            Labels::Scribbles(s) => form.part("scribbles", png("scribbles", s)),
            Labels::Masks { fg, bg } => form.part("fg", png("fg", fg)).part("bg", png("bg", bg)),
        };
        if let Some(spec) = spec {
            form = form.part("spec", Part::text(spec).mime_str("application/json").expect("valid mime"));
        }
        let resp = self.http.post(self.url("")).multipart(form).send().await?;
        Ok(check(resp).await?.json().await?)
    }

    pub async fn status(&self, id: &str) -> Result<JobStatus> {
        let resp = self.http.get(self.url(&format!("/{id}"))).send().await?;
        Ok(check(resp).await?.json().await?)
    }

    pub async fn list(&self) -> Result<Vec<JobStatus>> {
        let resp = self.http.get(self.url("")).send().await?;
        Ok(check(resp).await?.json().await?)
    }

    /// Downloads one of [`otseg_api::ARTIFACTS`].
    pub async fn fetch(&self, id: &str, name: &str) -> Result<Vec<u8>> {
        let resp = self.http.get(self.url(&format!("/{id}/result/{name}"))).send().await?;
        Ok(check(resp).await?.bytes().await?.to_vec())
    }

    /// Progress events: everything so far, then live ones, ending after the
    /// terminal `status` event.
    pub async fn events(&self, id: &str) -> Result<impl Stream<Item = Result<JobEvent>> + Unpin> {
        let resp = self.http.get(self.url(&format!("/{id}/events"))).send().await?;
        let bytes = check(resp).await?.bytes_stream();
        let state = (Box::pin(bytes), SseParser::default(), false);
        Ok(Box::pin(stream::unfold(state, |(mut bytes, mut parser, finished)| async move {
            if finished {
                return None;
            }
            loop {
                if let Some((name, data)) = parser.next_event() {
                    let event = decode(&name, &data);
                    let done = matches!(&event, Ok(e) if e.is_terminal()) || event.is_err();
                    return Some((event, (bytes, parser, done)));
                }
                match bytes.next().await {
                    Some(Ok(chunk)) => parser.feed(&chunk),
                    Some(Err(e)) => return Some((Err(e.into()), (bytes, parser, true))),
                    None => return Some((Err(Error::Truncated), (bytes, parser, true))),
                }
            }
        })))
    }

    /// Follows the event stream to the end, handing each checkpoint to
    /// `on_checkpoint`, and returns the terminal state.
    pub async fn follow(&self, id: &str, mut on_checkpoint: impl FnMut(&Checkpoint)) -> Result<Terminal> {
        let mut events = self.events(id).await?;
        while let Some(event) = events.next().await {
            match event? {
                JobEvent::Checkpoint(cp) => on_checkpoint(&cp),
                JobEvent::Status(t) => return Ok(t),
            }
        }
        Err(Error::Truncated)
    }
}

fn decode(name: &str, data: &str) -> Result<JobEvent> {
    let bad = |e: serde_json::Error| Error::Event { name: name.to_string(), reason: e.to_string() };
    match name {
        JobEvent::CHECKPOINT => Ok(JobEvent::Checkpoint(serde_json::from_str(data).map_err(bad)?)),
        JobEvent::STATUS => Ok(JobEvent::Status(serde_json::from_str(data).map_err(bad)?)),
        other => Err(Error::Event { name: other.to_string(), reason: "unknown event".into() }),
    }
}

/// Incremental `text/event-stream` parser. Comments and events without data
/// (keep-alives) are dropped.
#[derive(Default)]
struct SseParser {
    buf: Vec<u8>,
    name: String,
    data: Vec<String>,
}

impl SseParser {
    fn feed(&mut self, chunk: &[u8]) {
        self.buf.extend_from_slice(chunk);
    }

    fn next_event(&mut self) -> Option<(String, String)> {
        while let Some(end) = self.buf.iter().position(|&b| b == b'\n') {
            let raw: Vec<u8> = self.buf.drain(..=end).collect();
            let line = String::from_utf8_lossy(&raw);
            let line = line.trim_end_matches(['\n', '\r']);
            if line.is_empty() {
                let name = std::mem::take(&mut self.name);
                if self.data.is_empty() {
                    continue;
                }
                let data = std::mem::take(&mut self.data).join("\n");
                return Some((if name.is_empty() { "message".into() } else { name }, data));
            }
            if line.starts_with(':') {
                continue;
            }
            let (field, value) = line.split_once(':').unwrap_or((line, ""));
            let value = value.strip_prefix(' ').unwrap_or(value);
            match field {
                "event" => self.name = value.to_string(),
                "data" => self.data.push(value.to_string()),
                _ => {}
            }
        }
        None
    }
}
