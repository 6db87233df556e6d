use std::net::SocketAddr;

use axum::extract::{DefaultBodyLimit, Multipart, Path, Query, Request, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use lams_core::imageio::{decode_base64, encode_base64, ImageInput};
use lams_core::masking::{InstancePolicy, MaskOptions};
use lams_core::pipeline::FieldError;
use lams_core::schedule::{preview_schedule, SchedulerSpec};
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::net::TcpListener;

use crate::service::MaskPreviewError;
use crate::{JobState, RunQuery, Service, SubmitError};

const BODY_LIMIT: usize = 64 * 1024 * 1024;

pub fn router(service: Service) -> Router {
    Router::new()
        .route("/api/v1/edits", post(submit_edit))
        .route("/api/v1/edits/{id}", get(get_edit))
        .route("/api/v1/edits/{id}/result", get(get_result))
        .route("/api/v1/artifacts/{name}", get(get_artifact))
        .route("/api/v1/masks", post(preview_mask))
        .route("/api/v1/schedulers/preview", get(preview_scheduler))
        .route("/api/v1/runs", get(list_runs))
        .route("/api/v1/status", get(status))
        .layer(DefaultBodyLimit::max(BODY_LIMIT))
        .with_state(service)
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    service: Service,
    listener: TcpListener,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(service)).with_graceful_shutdown(shutdown).await
}

/// Binds `addr` and serves in the background; returns the bound address.
pub async fn spawn(service: Service, addr: SocketAddr) -> std::io::Result<(SocketAddr, tokio::task::JoinHandle<()>)> {
    let listener = TcpListener::bind(addr).await?;
    let local = listener.local_addr()?;
    let handle = tokio::spawn(async move {
        if let Err(e) = axum::serve(listener, router(service)).await {
            log::error!("server stopped: {e}");
        }
    });
    Ok((local, handle))
}

struct ApiError {
    status: StatusCode,
    body: Value,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self { status, body: json!({ "error": message.into() }) }
    }

    fn fields(fields: Vec<FieldError>) -> Self {
        Self { status: StatusCode::BAD_REQUEST, body: json!({ "error": "invalid request", "fields": fields }) }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

impl From<SubmitError> for ApiError {
    fn from(e: SubmitError) -> Self {
        match e {
            SubmitError::Invalid(fields) => ApiError::fields(fields),
            SubmitError::BadImage(m) => ApiError {
                status: StatusCode::BAD_REQUEST,
                body: json!({ "error": "malformed image", "fields": [{ "field": "image", "message": m }] }),
            },
            SubmitError::Duplicate(id) => ApiError {
                status: StatusCode::CONFLICT,
                body: json!({ "error": "an identical request is already in flight", "job_id": id }),
            },
            SubmitError::Internal(m) => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, m),
        }
    }
}

fn is_multipart(headers: &HeaderMap) -> bool {
    headers
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.starts_with("multipart/form-data"))
}

async fn json_body(req: Request) -> Result<Value, ApiError> {
    let bytes = axum::body::to_bytes(req.into_body(), BODY_LIMIT)
        .await
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.to_string()))?;
    serde_json::from_slice(&bytes).map_err(|e| {
        ApiError::fields(vec![FieldError { field: "body".into(), message: format!("malformed JSON: {e}") }])
    })
}

/// Collects multipart parts into a JSON object. File parts `image` and
/// `mask` become inline base64 inputs, a `request` part holding a JSON
/// object is merged in, and other text parts become fields (parsed as JSON
/// when possible, otherwise kept as strings).
async fn multipart_body(req: Request) -> Result<Value, ApiError> {
    let bad = |e: axum::extract::multipart::MultipartError| ApiError::new(StatusCode::BAD_REQUEST, e.body_text());
    let mut mp = <Multipart as axum::extract::FromRequest<()>>::from_request(req, &())
        .await
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.body_text()))?;
    let mut obj = serde_json::Map::new();
    while let Some(part) = mp.next_field().await.map_err(bad)? {
        let name = part.name().unwrap_or_default().to_string();
        match name.as_str() {
            "image" | "mask" => {
                let bytes = part.bytes().await.map_err(bad)?;
                obj.insert(name, json!({ "base64": encode_base64(&bytes) }));
            }
            "request" => {
                let text = part.text().await.map_err(bad)?;
                let Ok(Value::Object(extra)) = serde_json::from_str::<Value>(&text) else {
                    return Err(ApiError::fields(vec![FieldError {
                        field: "request".into(),
                        message: "must be a JSON object".into(),
                    }]));
                };
                obj.extend(extra);
            }
            _ => {
                let text = part.text().await.map_err(bad)?;
                let value = match serde_json::from_str::<Value>(&text) {
                    Ok(v @ (Value::Object(_) | Value::Number(_) | Value::Bool(_) | Value::Array(_))) => v,
                    _ => Value::String(text),
                };
                obj.insert(name, value);
            }
        }
    }
    Ok(Value::Object(obj))
}

async fn request_body(headers: &HeaderMap, req: Request) -> Result<Value, ApiError> {
    if is_multipart(headers) {
        multipart_body(req).await
    } else {
        json_body(req).await
    }
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))
}

async fn submit_edit(State(svc): State<Service>, headers: HeaderMap, req: Request) -> Result<Response, ApiError> {
    let body = request_body(&headers, req).await?;
    let id = blocking(move || svc.parse_request(body).and_then(|r| svc.submit(r))).await??;
    Ok((StatusCode::ACCEPTED, [(header::LOCATION, format!("/api/v1/edits/{id}"))], Json(json!({ "job_id": id })))
        .into_response())
}

fn unknown(id: &str) -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, format!("no job `{id}`"))
}

async fn get_edit(State(svc): State<Service>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let rec = svc.get(&id).ok_or_else(|| unknown(&id))?;
    Ok(Json(rec).into_response())
}

async fn get_result(State(svc): State<Service>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let rec = svc.get(&id).ok_or_else(|| unknown(&id))?;
    let result = match (&rec.state, &rec.result) {
        (JobState::Done, Some(r)) => r.clone(),
        (JobState::Failed { stage, message, retryable }, _) => {
            return Err(ApiError {
                status: StatusCode::CONFLICT,
                body: json!({ "error": "job failed", "stage": stage, "message": message, "retryable": retryable }),
            })
        }
        (state, _) => {
            return Err(ApiError {
                status: StatusCode::CONFLICT,
                body: json!({ "error": "job is not finished", "state": state.name() }),
            })
        }
    };
    let read = |sha: &str| {
        svc.artifacts()
            .get(sha)
            .ok_or_else(|| ApiError::new(StatusCode::GONE, format!("artifact {sha} is no longer stored")))
    };
    let edited = read(&result.edited.sha256)?;
    let reconstruction = read(&result.reconstruction.sha256)?;
    let mask = match &result.mask {
        Some(m) => Some(encode_base64(&read(&m.sha256)?)),
        None => None,
    };
    Ok(Json(json!({
        "job_id": rec.id,
        "edited_png_base64": encode_base64(&edited),
        "reconstruction_png_base64": encode_base64(&reconstruction),
        "mask_png_base64": mask,
        "artifacts": { "edited": result.edited, "reconstruction": result.reconstruction, "mask": result.mask },
        "summary": result.summary,
        "metrics": result.metrics,
        "request": rec.request,
    }))
    .into_response())
}

async fn get_artifact(State(svc): State<Service>, Path(name): Path<String>) -> Result<Response, ApiError> {
    let sha = name.strip_suffix(".png").unwrap_or(&name);
    let bytes = svc
        .artifacts()
        .get(sha)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("no artifact `{name}`")))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

#[derive(Deserialize)]
struct MaskBody {
    image: ImageInput,
    mask_prompt: String,
    #[serde(default)]
    policy: Option<InstancePolicy>,
    #[serde(default)]
    dilation: Option<usize>,
}

async fn preview_mask(State(svc): State<Service>, headers: HeaderMap, req: Request) -> Result<Response, ApiError> {
    let body = request_body(&headers, req).await?;
    let body: MaskBody = serde_json::from_value(body).map_err(|e| {
        let msg = e.to_string();
        let field = if msg.contains("mask_prompt") {
            "mask_prompt"
        } else if msg.contains("image") {
            "image"
        } else {
            "body"
        };
        ApiError::fields(vec![FieldError { field: field.into(), message: msg }])
    })?;
    let base = svc.config().input_dir.clone();
    let bytes = match &body.image {
        ImageInput::Base64(data) => decode_base64(data),
        path => path.bytes(base.as_deref()),
    }
    .map_err(|e| ApiError::fields(vec![FieldError { field: "image".into(), message: e.to_string() }]))?;
    let defaults = svc.config().mask;
    let options = MaskOptions {
        policy: body.policy.unwrap_or(defaults.policy),
        dilation: body.dilation.unwrap_or(defaults.dilation),
    };
    let preview =
        blocking(move || svc.preview_mask(&bytes, &body.mask_prompt, options)).await?.map_err(|e| match e {
            MaskPreviewError::BadRequest(m) => ApiError::new(StatusCode::BAD_REQUEST, m),
            MaskPreviewError::Unavailable(m) => ApiError::new(StatusCode::BAD_GATEWAY, m),
            MaskPreviewError::Failed(m) => ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, m),
        })?;
    let mut headers = HeaderMap::new();
    headers.insert(header::CONTENT_TYPE, HeaderValue::from_static("image/png"));
    headers.insert("x-mask-instances", HeaderValue::from(preview.instances));
    if let Ok(v) = HeaderValue::from_str(&format!("{:.6}", preview.latent_coverage)) {
        headers.insert("x-mask-coverage", v);
    }
    if let Some(w) = preview.warning.as_deref().and_then(|w| HeaderValue::from_str(w).ok()) {
        headers.insert("x-mask-warning", w);
    }
    Ok((headers, preview.png).into_response())
}

#[derive(Deserialize)]
struct PreviewQuery {
    start: Option<f64>,
    end: Option<f64>,
    until: Option<usize>,
    #[serde(rename = "type")]
    decay: Option<String>,
    steps: Option<usize>,
}

async fn preview_scheduler(State(svc): State<Service>, Query(q): Query<PreviewQuery>) -> Result<Response, ApiError> {
    let d = SchedulerSpec::default_attention();
    let spec_text = format!(
        "{},{},{},{}",
        q.start.unwrap_or(d.start),
        q.end.unwrap_or(d.end),
        q.until.unwrap_or(d.until),
        q.decay.unwrap_or_else(|| d.decay.to_string())
    );
    let spec: SchedulerSpec = spec_text
        .parse()
        .map_err(|e: lams_core::schedule::ScheduleError| ApiError::new(StatusCode::BAD_REQUEST, e.to_string()))?;
    let steps = q.steps.unwrap_or(svc.config().backend.steps);
    let preview = preview_schedule(&spec, steps).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.to_string()))?;
    Ok(Json(preview).into_response())
}

#[derive(Deserialize)]
struct RunsQuery {
    limit: Option<usize>,
    offset: Option<usize>,
    state: Option<String>,
}

async fn list_runs(State(svc): State<Service>, Query(q): Query<RunsQuery>) -> Result<Response, ApiError> {
    const STATES: [&str; 5] = ["queued", "inverting", "denoising", "done", "failed"];
    if let Some(s) = &q.state {
        if !STATES.contains(&s.as_str()) {
            return Err(ApiError::new(StatusCode::BAD_REQUEST, format!("unknown state `{s}`")));
        }
    }
    let query = RunQuery { limit: q.limit.unwrap_or(50).min(1000), offset: q.offset.unwrap_or(0), state: q.state };
    let (runs, total) = svc.list(&query);
    Ok(([("x-total-count", total.to_string())], Json(runs)).into_response())
}

async fn status(State(svc): State<Service>) -> Json<crate::StatusReport> {
    Json(svc.status())
}
