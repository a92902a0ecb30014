//! HTTP facade over the attendance engine.
//!
//! Every handler decodes its request, runs the matching engine operation on
//! the blocking pool, and encodes the result; all failures leave as an
//! [`ApiError`] body.

pub mod error;
pub mod feed;
pub mod jobs;

pub use error::{ApiError, ERROR_CODES};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::IntoResponse;
use axum::routing::{get, post};
use axum::{Json, Router};
use feed::{FeedItem, Feeds, Subscriber};
use futures::stream::{self, Stream};
use jobs::Jobs;
use presencia_core::attendance::{parse_timestamp, RecognitionEvent, SessionState, SessionSummary};
use presencia_core::classifier::HeadHyper;
use presencia_core::engine::{Engine, TrainOverrides};
use presencia_core::error::PipelineError;
use presencia_core::image::decode_pnm;
use presencia_core::siamese::SiameseHyper;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::convert::Infallible;
use std::sync::Arc;
use std::time::Duration;
use tower_http::cors::CorsLayer;

/// Frames and samples are raw PNM, so allow well beyond a 1080p pixmap.
pub const MAX_BODY_BYTES: usize = 64 << 20;

pub const TIMESTAMP_HEADER: &str = "x-timestamp";

#[derive(Clone)]
pub struct AppState {
    pub engine: Arc<Engine>,
    feeds: Arc<Feeds>,
    jobs: Arc<Jobs>,
}

impl AppState {
    pub fn new(engine: Arc<Engine>) -> Self {
        AppState { engine, feeds: Arc::default(), jobs: Arc::default() }
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/persons", post(create_person))
        .route("/api/persons/{id}/samples", post(add_sample))
        .route("/api/persons/{id}/finalize", post(finalize))
        .route("/api/train", post(start_training))
        .route("/api/train/{job_id}", get(training_status))
        .route("/api/sessions", post(create_session))
        .route("/api/sessions/{id}/frames", post(push_frame))
        .route("/api/sessions/{id}/end", post(end_session))
        .route("/api/sessions/{id}/export.csv", get(export_csv))
        .route("/api/sessions/{id}/events", get(session_events))
        .fallback(no_route)
        .method_not_allowed_fallback(no_route)
        .layer(DefaultBodyLimit::max(MAX_BODY_BYTES))
        .layer(CorsLayer::permissive())
        .with_state(state)
}

/// Serves `engine` on `listener` until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    engine: Arc<Engine>,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(AppState::new(engine))).with_graceful_shutdown(shutdown).await
}

async fn no_route() -> ApiError {
    ApiError::new("NOT_FOUND", "no such endpoint")
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, PipelineError> + Send + 'static,
) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiError::internal(e.to_string()))?.map_err(ApiError::from)
}

/// An empty body reads as `T::default()`.
fn json_body<T: DeserializeOwned + Default>(body: &Bytes) -> Result<T, ApiError> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Ok(T::default());
    }
    serde_json::from_slice(body).map_err(|e| ApiError::invalid_input(format!("request body: {e}")))
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct NewPerson {
    id: String,
    name: String,
}

async fn create_person(State(app): State<AppState>, body: Bytes) -> Result<impl IntoResponse, ApiError> {
    let req: NewPerson = json_body(&body)?;
    let engine = app.engine.clone();
    let rec = blocking(move || engine.register_person(&req.id, &req.name)).await?;
    Ok((StatusCode::CREATED, Json(rec)))
}

#[derive(Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct SampleReply {
    pub stored: bool,
    pub sample_count: u64,
}

async fn add_sample(
    State(app): State<AppState>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Json<SampleReply>, ApiError> {
    let engine = app.engine.clone();
    let out = blocking(move || {
        let frame = decode_pnm(&body)?;
        engine.capture_sample(&id, &frame)
    })
    .await?;
    Ok(Json(SampleReply { stored: out.stored, sample_count: out.sample_count }))
}

async fn finalize(State(app): State<AppState>, Path(id): Path<String>) -> Result<impl IntoResponse, ApiError> {
    let engine = app.engine.clone();
    Ok(Json(blocking(move || engine.finalize_enrollment(&id)).await?))
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainRequest {
    siamese_hyper: Option<SiameseHyper>,
    head_hyper: Option<HeadHyper>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct JobReply {
    pub job_id: String,
}

async fn start_training(State(app): State<AppState>, body: Bytes) -> Result<impl IntoResponse, ApiError> {
    let req: TrainRequest = json_body(&body)?;
    let slot = app
        .jobs
        .try_acquire()
        .ok_or_else(|| ApiError::from(PipelineError::TrainingInProgress))?;
    let engine = app.engine.clone();
    blocking(move || engine.check_trainable()).await?;
    let (job_id, handle) = app.jobs.create();
    let engine = app.engine.clone();
    let overrides = TrainOverrides { siamese: req.siamese_hyper, head: req.head_hyper };
    tokio::task::spawn_blocking(move || {
        let _slot = slot;
        let outcome = engine
            .train_with(overrides, |epoch, loss| handle.progress(epoch, loss))
            .map_err(ApiError::from)
            .and_then(|report| serde_json::to_value(report).map_err(|e| ApiError::internal(e.to_string())));
        handle.finish(outcome);
    });
    Ok((StatusCode::ACCEPTED, Json(JobReply { job_id })))
}

async fn training_status(State(app): State<AppState>, Path(job_id): Path<String>) -> Result<impl IntoResponse, ApiError> {
    app.jobs
        .get(&job_id)
        .map(Json)
        .ok_or_else(|| ApiError::new("JOB_NOT_FOUND", format!("training job {job_id} not found")))
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct NewSession {
    name: String,
    debounce_s: Option<u64>,
}

async fn create_session(State(app): State<AppState>, body: Bytes) -> Result<impl IntoResponse, ApiError> {
    let req: NewSession = json_body(&body)?;
    let engine = app.engine.clone();
    let session = blocking(move || engine.start_session(&req.name, req.debounce_s, None)).await?;
    Ok((StatusCode::CREATED, Json(session)))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FramesReply {
    pub events: Vec<RecognitionEvent>,
}

fn frame_timestamp(headers: &HeaderMap) -> Result<chrono::DateTime<chrono::Utc>, ApiError> {
    let raw = headers
        .get(TIMESTAMP_HEADER)
        .ok_or_else(|| ApiError::invalid_input("missing X-Timestamp header"))?
        .to_str()
        .map_err(|_| ApiError::invalid_input("X-Timestamp is not text"))?;
    parse_timestamp(raw).map_err(ApiError::from)
}

async fn push_frame(
    State(app): State<AppState>,
    Path(id): Path<String>,
    headers: HeaderMap,
    body: Bytes,
) -> Result<Json<FramesReply>, ApiError> {
    let timestamp = frame_timestamp(&headers)?;
    let frame = decode_pnm(&body).map_err(|e| ApiError::from(PipelineError::from(e)))?;
    let engine = app.engine.clone();
    let sid = id.clone();
    let session = blocking(move || engine.session(&sid)).await?;
    if session.state != SessionState::Running {
        return Err(PipelineError::SessionNotRunning(id).into());
    }
    let feed = app.feeds.get_or_create(&id);
    let _turn = feed.queue.lock().await;
    let engine = app.engine.clone();
    let sid = id.clone();
    match blocking(move || engine.process_frame(&sid, &frame, timestamp)).await {
        Ok(events) => {
            feed.publish(&events);
            Ok(Json(FramesReply { events }))
        }
        Err(e) => {
            if e.code == "SESSION_NOT_RUNNING" || e.code == "SESSION_NOT_FOUND" {
                app.feeds.remove(&id);
            }
            Err(e)
        }
    }
}

async fn end_session(State(app): State<AppState>, Path(id): Path<String>) -> Result<Json<SessionSummary>, ApiError> {
    let feed = app.feeds.get_or_create(&id);
    let _turn = feed.queue.lock().await;
    let engine = app.engine.clone();
    let sid = id.clone();
    let outcome = blocking(move || engine.end_session(&sid, None)).await;
    match &outcome {
        Ok(summary) => feed.close(*summary),
        Err(e) if e.code != "SESSION_NOT_FOUND" && e.code != "SESSION_NOT_RUNNING" => return Err(e.clone()),
        Err(_) => {}
    }
    app.feeds.remove(&id);
    outcome.map(Json)
}

async fn export_csv(State(app): State<AppState>, Path(id): Path<String>) -> Result<impl IntoResponse, ApiError> {
    let engine = app.engine.clone();
    let csv = blocking(move || {
        engine.session(&id)?;
        engine.export_csv(&id)
    })
    .await?;
    Ok(([(header::CONTENT_TYPE, "text/csv; charset=utf-8")], csv))
}

fn sse_item(item: FeedItem) -> Event {
    match item {
        FeedItem::Event(e) => Event::default()
            .event("recognition")
            .id(e.seq.to_string())
            .json_data(&*e)
            .expect("events serialize"),
        FeedItem::End(summary) => Event::default().event("end").json_data(summary).expect("summaries serialize"),
    }
}

enum Source {
    Live(Subscriber),
    Ended(Option<SessionSummary>),
}

/// Server-sent events: one `recognition` event per [`RecognitionEvent`]
/// processed after the subscriber connected, then a final `end` event
/// carrying the session summary.
async fn session_events(
    State(app): State<AppState>,
    Path(id): Path<String>,
) -> Result<Sse<impl Stream<Item = Result<Event, Infallible>>>, ApiError> {
    let feed = app.feeds.get_or_create(&id);
    let source = {
        let _turn = feed.queue.lock().await;
        let engine = app.engine.clone();
        let sid = id.clone();
        let looked_up = blocking(move || {
            let session = engine.session(&sid)?;
            let marked = engine.session_records(&sid)?.len() as u64;
            Ok((session, marked))
        })
        .await;
        match looked_up {
            Ok((session, _)) if session.state == SessionState::Running => Source::Live(feed.subscribe()),
            Ok((session, marked)) => {
                app.feeds.remove(&id);
                let summary = SessionSummary { persons_marked: marked, total_events: session.event_count };
                Source::Ended(Some(summary))
            }
            Err(e) => {
                app.feeds.remove(&id);
                return Err(e);
            }
        }
    };
    let stream = stream::unfold(source, |source| async move {
        match source {
            Source::Live(mut sub) => sub.next().await.map(|item| (Ok(sse_item(item)), Source::Live(sub))),
            Source::Ended(summary) => summary.map(|s| (Ok(sse_item(FeedItem::End(s))), Source::Ended(None))),
        }
    });
    Ok(Sse::new(stream).keep_alive(KeepAlive::new().interval(Duration::from_secs(15))))
}
