//! JSON-over-HTTP frontend.
//!
//! Every request body is one encoded image. At most `parallelism` frames are
//! processed at once and at most `queue` more may wait; anything beyond that
//! gets 429 straight away.

use std::sync::Arc;
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Query, State};
use axum::http::{HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::sync::{OwnedSemaphorePermit, Semaphore};

use scenecount::pipeline::{FrameError, FrameRecord, Stage};
use scenecount::visualize::encode_png;
use scenecount::{render_result, Artifacts, Frame, Loaded, PipelineConfig};

use crate::{classify_json, count_json};

pub struct AppState {
    loaded: Loaded,
    slots: Arc<Semaphore>,
    admission: Arc<Semaphore>,
}

impl AppState {
    pub fn new(loaded: Loaded) -> Arc<Self> {
        let svc = &loaded.config.service;
        Arc::new(AppState {
            slots: Arc::new(Semaphore::new(svc.parallelism)),
            admission: Arc::new(Semaphore::new(svc.parallelism + svc.queue)),
            loaded,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.loaded.config
    }

    /// Admission then a processing slot; `None` means the queue is full.
    async fn acquire(&self) -> Option<(OwnedSemaphorePermit, OwnedSemaphorePermit)> {
        let admitted = self.admission.clone().try_acquire_owned().ok()?;
        let slot = self.slots.clone().acquire_owned().await.ok()?;
        Some((admitted, slot))
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    let limit = state.config().service.max_body_bytes;
    Router::new()
        .route("/v1/count", post(count))
        .route("/v1/classify", post(classify))
        .route("/health", get(health))
        .route("/v1/config", get(config))
        .layer(DefaultBodyLimit::max(limit))
        .with_state(state)
}

fn error(status: StatusCode, message: impl std::fmt::Display) -> Response {
    (status, Json(json!({ "error": message.to_string() }))).into_response()
}

fn busy() -> Response {
    error(StatusCode::TOO_MANY_REQUESTS, "request queue is full")
}

fn decode(state: &AppState, body: &[u8]) -> Result<Frame, Response> {
    if body.is_empty() {
        return Err(error(
            StatusCode::BAD_REQUEST,
            "empty body: expected image bytes",
        ));
    }
    state
        .loaded
        .truth
        .frame(body)
        .map_err(|e| error(StatusCode::BAD_REQUEST, format!("cannot decode image: {e}")))
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(rename_all = "lowercase")]
enum RenderKind {
    Boxes,
    Heatmap,
}

enum Outcome {
    Counted(Value),
    Failed(FrameError),
    RenderFailed(String),
}

#[derive(Debug, Deserialize)]
struct CountQuery {
    render: Option<RenderKind>,
}

async fn count(
    State(state): State<Arc<AppState>>,
    query: Result<Query<CountQuery>, axum::extract::rejection::QueryRejection>,
    body: Bytes,
) -> Response {
    let Ok(Query(query)) = query else {
        return error(
            StatusCode::BAD_REQUEST,
            "render must be `boxes` or `heatmap`",
        );
    };
    let started = Instant::now();
    let frame = match decode(&state, &body) {
        Ok(f) => f,
        Err(r) => return r,
    };
    let Some(_permits) = state.acquire().await else {
        return busy();
    };
    let worker = state.clone();
    let joined = tokio::task::spawn_blocking(move || {
        let result = match worker.loaded.pipeline.process_frame(&frame) {
            FrameRecord::Ok(r) => r,
            FrameRecord::Error(e) => return Outcome::Failed(e),
        };
        let mut body = count_json(&result);
        if let Some(kind) = query.render {
            let png = match overlay(&worker, &frame, &result, kind) {
                Ok(png) => png,
                Err(e) => return Outcome::RenderFailed(e.to_string()),
            };
            let produced = match result.artifacts {
                Some(Artifacts::Density(_)) => "heatmap",
                _ => "boxes",
            };
            body["overlay"] = json!({
                "kind": produced,
                "png_base64": base64::engine::general_purpose::STANDARD.encode(png),
            });
        }
        Outcome::Counted(body)
    })
    .await;
    let mut resp = match joined {
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e),
        Ok(Outcome::Counted(body)) => Json(body).into_response(),
        Ok(Outcome::RenderFailed(msg)) => error(
            StatusCode::INTERNAL_SERVER_ERROR,
            format!("render failed: {msg}"),
        ),
        Ok(Outcome::Failed(e)) => {
            let status = match e.stage {
                Stage::Decode => StatusCode::BAD_REQUEST,
                _ => StatusCode::INTERNAL_SERVER_ERROR,
            };
            (
                status,
                Json(json!({ "error": e.message, "stage": e.stage, "model": e.model_id })),
            )
                .into_response()
        }
    };
    latency_header(&mut resp, started);
    resp
}

/// Draws whatever the routed model produced: boxes for detectors, a heatmap
/// for the density model.
fn overlay(
    state: &AppState,
    frame: &Frame,
    result: &scenecount::FrameResult,
    kind: RenderKind,
) -> scenecount::Result<Vec<u8>> {
    let produced_heatmap = matches!(result.artifacts, Some(Artifacts::Density(_)));
    if produced_heatmap != matches!(kind, RenderKind::Heatmap) {
        tracing::debug!(frame = %frame.id, requested = ?kind, "overlay kind follows the routed model");
    }
    let cfg = state.config();
    let rgb = frame.rgb()?;
    let img = render_result(&rgb, result, &cfg.render, &cfg.density)?;
    encode_png(&img)
}

fn latency_header(resp: &mut Response, started: Instant) {
    let ms = format!("{:.3}", started.elapsed().as_secs_f64() * 1e3);
    if let Ok(v) = HeaderValue::from_str(&ms) {
        resp.headers_mut().insert("x-latency-ms", v);
    }
}

async fn classify(State(state): State<Arc<AppState>>, body: Bytes) -> Response {
    let started = Instant::now();
    let frame = match decode(&state, &body) {
        Ok(f) => f,
        Err(r) => return r,
    };
    let Some(_permits) = state.acquire().await else {
        return busy();
    };
    let worker = state.clone();
    let out = tokio::task::spawn_blocking(move || {
        worker
            .loaded
            .pipeline
            .classify(&frame)
            .map(|c| classify_json(&frame.id, &c))
    })
    .await;
    let mut resp = match out {
        Ok(Ok(v)) => Json(v).into_response(),
        Ok(Err(e)) => error(StatusCode::INTERNAL_SERVER_ERROR, e),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e),
    };
    latency_header(&mut resp, started);
    resp
}

async fn health(State(state): State<Arc<AppState>>) -> Json<Value> {
    Json(json!({ "status": "ok", "backends": state.loaded.pipeline.backend_count() }))
}

async fn config(State(state): State<Arc<AppState>>) -> Json<Value> {
    Json(serde_json::to_value(state.config()).unwrap_or(Value::Null))
}

/// Binds `listen` and serves until ctrl-c, letting in-flight requests
/// finish.
pub async fn serve(loaded: Loaded, listen: &str) -> anyhow::Result<()> {
    let state = AppState::new(loaded);
    let listener = tokio::net::TcpListener::bind(listen)
        .await
        .map_err(|e| anyhow::anyhow!("cannot bind {listen}: {e}"))?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
            tracing::info!("shutting down");
        })
        .await?;
    Ok(())
}
