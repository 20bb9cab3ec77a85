//! HTTP routes.
//!
//! | method | path | |
//! |---|---|---|
//! | POST | `/sessions` | `{task, reading_text?}` → 201 session |
//! | GET | `/sessions?task&state&from_ms&to_ms` | `{sessions: [...]}` |
//! | GET | `/sessions/{id}` | session, enrollments, latest job |
//! | POST | `/sessions/{id}/enroll?speaker=therapist\|client` | WAV body → model status |
//! | POST | `/sessions/{id}/recording` | WAV body → 202 job |
//! | POST | `/sessions/{id}/recording/chunk` | WAV body, staged |
//! | POST | `/sessions/{id}/recording/stop` | staged chunks → 202 job |
//! | GET | `/sessions/{id}/analysis` | `analysis.json` |
//! | GET | `/sessions/{id}/spectrogram?from&to` | dB spectrogram, span < 10 s |
//! | GET | `/sessions/{id}/audio?from&to` | WAV |
//! | GET | `/jobs/{id}` | job |

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;
use stutter_core::speaker::SpeakerLabel;
use stutter_core::store::{SessionFilter, SessionTask};

use crate::app::App;
use crate::error::ApiError;

type Shared = State<Arc<App>>;
type ApiResult = Result<Response, ApiError>;

pub fn router(app: Arc<App>, max_body_bytes: usize) -> Router {
    Router::new()
        .route("/sessions", post(create_session).get(list_sessions))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/enroll", post(enroll))
        .route("/sessions/{id}/recording", post(submit_recording))
        .route("/sessions/{id}/recording/chunk", post(append_chunk))
        .route("/sessions/{id}/recording/stop", post(stop_recording))
        .route("/sessions/{id}/analysis", get(get_analysis))
        .route("/sessions/{id}/spectrogram", get(get_spectrogram))
        .route("/sessions/{id}/audio", get(get_audio))
        .route("/jobs/{id}", get(get_job))
        .fallback(|| async { ApiError::NotFound("route".into()) })
        .layer(DefaultBodyLimit::max(max_body_bytes))
        .with_state(app)
}

fn query<T>(q: Result<Query<T>, QueryRejection>) -> Result<T, ApiError> {
    q.map(|Query(t)| t)
        .map_err(|e| ApiError::BadRequest(e.body_text()))
}

fn json_ok(status: StatusCode, value: impl serde::Serialize) -> ApiResult {
    Ok((status, Json(value)).into_response())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateSession {
    task: SessionTask,
    reading_text: Option<String>,
}

async fn create_session(
    State(app): Shared,
    body: Result<Json<CreateSession>, JsonRejection>,
) -> ApiResult {
    let Json(req) = body.map_err(|e| ApiError::BadRequest(e.body_text()))?;
    let view = app.create_session(req.task, req.reading_text).await?;
    json_ok(StatusCode::CREATED, view)
}

async fn list_sessions(
    State(app): Shared,
    filter: Result<Query<SessionFilter>, QueryRejection>,
) -> ApiResult {
    let sessions = app.list_sessions(&query(filter)?)?;
    json_ok(StatusCode::OK, json!({ "sessions": sessions }))
}

async fn get_session(State(app): Shared, Path(id): Path<String>) -> ApiResult {
    json_ok(StatusCode::OK, app.session(&id)?)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EnrollQuery {
    #[serde(default = "therapist")]
    speaker: SpeakerLabel,
}

fn therapist() -> SpeakerLabel {
    SpeakerLabel::Therapist
}

async fn enroll(
    State(app): Shared,
    Path(id): Path<String>,
    q: Result<Query<EnrollQuery>, QueryRejection>,
    body: Bytes,
) -> ApiResult {
    let speaker = query(q)?.speaker;
    json_ok(
        StatusCode::OK,
        app.enroll(&id, speaker, body.to_vec()).await?,
    )
}

async fn submit_recording(State(app): Shared, Path(id): Path<String>, body: Bytes) -> ApiResult {
    json_ok(
        StatusCode::ACCEPTED,
        app.submit_recording(&id, body.to_vec()).await?,
    )
}

async fn append_chunk(State(app): Shared, Path(id): Path<String>, body: Bytes) -> ApiResult {
    json_ok(StatusCode::OK, app.append_chunk(&id, body.to_vec()).await?)
}

async fn stop_recording(State(app): Shared, Path(id): Path<String>) -> ApiResult {
    json_ok(StatusCode::ACCEPTED, app.stop_recording(&id).await?)
}

async fn get_analysis(State(app): Shared, Path(id): Path<String>) -> ApiResult {
    let bytes = app.analysis(&id)?;
    Ok(([(header::CONTENT_TYPE, "application/json")], bytes).into_response())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Range {
    from: Option<f64>,
    to: Option<f64>,
}

async fn get_spectrogram(
    State(app): Shared,
    Path(id): Path<String>,
    q: Result<Query<Range>, QueryRejection>,
) -> ApiResult {
    let Range { from, to } = query(q)?;
    let (Some(from), Some(to)) = (from, to) else {
        return Err(ApiError::BadRequest("both from and to are required".into()));
    };
    json_ok(StatusCode::OK, app.spectrogram(&id, from, to).await?)
}

async fn get_audio(
    State(app): Shared,
    Path(id): Path<String>,
    q: Result<Query<Range>, QueryRejection>,
) -> ApiResult {
    let range = match query(q)? {
        Range {
            from: None,
            to: None,
        } => None,
        Range {
            from: Some(from),
            to: Some(to),
        } => Some((from, to)),
        _ => {
            return Err(ApiError::BadRequest(
                "give both from and to, or neither".into(),
            ))
        }
    };
    let bytes = app.audio(&id, range).await?;
    Ok(([(header::CONTENT_TYPE, "audio/wav")], bytes).into_response())
}

async fn get_job(State(app): Shared, Path(id): Path<String>) -> ApiResult {
    json_ok(StatusCode::OK, app.job(&id)?)
}
