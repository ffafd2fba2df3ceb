//! HTTP routes.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use eventcanvas::condition::CHANNEL_LAYOUT;
use eventcanvas::triplet::parse_triplet;
use eventcanvas::Error as CoreError;
use serde::Deserialize;
use serde_json::json;

use crate::store::{content_type, AssetKind, GenerateRequest, JobStatus, StoreError, Submitted};
use crate::worker::ServiceContext;

pub const IDEMPOTENCY_HEADER: &str = "idempotency-key";

type Ctx = State<Arc<ServiceContext>>;

fn error(status: StatusCode, msg: impl Into<String>) -> Response {
    (status, Json(json!({ "error": msg.into() }))).into_response()
}

pub fn router(ctx: Arc<ServiceContext>) -> Router {
    // Bodies one byte over the cap still reach the handler, which answers
    // with its own 413.
    let limit = ctx.config.max_asset_bytes.saturating_add(1).max(1 << 20);
    Router::new()
        .route("/assets", post(upload_asset))
        .route("/assets/{id}", get(get_asset))
        .route("/jobs/generate", post(submit_generation))
        .route("/jobs/{id}", get(job_status))
        .route("/jobs/{id}/result", get(job_result))
        .route("/health", get(health))
        .route("/config", get(config))
        .layer(DefaultBodyLimit::max(limit))
        .with_state(ctx)
}

#[derive(Debug, Deserialize)]
struct UploadQuery {
    kind: Option<String>,
}

async fn upload_asset(State(ctx): Ctx, Query(q): Query<UploadQuery>, body: Bytes) -> Response {
    let kind = match q.kind.as_deref().unwrap_or("image").parse::<AssetKind>() {
        Ok(k) => k,
        Err(e) => return error(StatusCode::BAD_REQUEST, e.to_string()),
    };
    match ctx.assets.put_image(&body, kind) {
        Ok(info) => (StatusCode::CREATED, Json(info)).into_response(),
        Err(e @ StoreError::TooLarge { .. }) => error(StatusCode::PAYLOAD_TOO_LARGE, e.to_string()),
        Err(e @ StoreError::Unsupported(_)) => error(StatusCode::UNSUPPORTED_MEDIA_TYPE, e.to_string()),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

async fn get_asset(State(ctx): Ctx, Path(id): Path<String>) -> Response {
    match ctx.assets.get(&id) {
        Some(bytes) => ([(header::CONTENT_TYPE, content_type(&bytes))], bytes).into_response(),
        None => error(StatusCode::NOT_FOUND, format!("unknown asset {id}")),
    }
}

async fn submit_generation(State(ctx): Ctx, headers: HeaderMap, body: Bytes) -> Response {
    let mut request: GenerateRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return error(StatusCode::BAD_REQUEST, format!("malformed request: {e}")),
    };
    let header_key = headers.get(IDEMPOTENCY_HEADER).and_then(|v| v.to_str().ok()).map(str::to_owned);
    let key = header_key.or_else(|| request.idempotency_key.take());
    let triplet_bytes = serde_json::to_vec(&request.triplet).expect("json value serializes");
    let triplet = match parse_triplet(&triplet_bytes) {
        Ok(t) => t,
        Err(CoreError::Invalid(report)) => return (StatusCode::BAD_REQUEST, Json(report)).into_response(),
        Err(e) => return error(StatusCode::BAD_REQUEST, e.to_string()),
    };
    let grid = ctx.model.grid();
    if triplet.frame_size != grid.frame_size || triplet.num_frames != grid.num_frames {
        return error(
            StatusCode::BAD_REQUEST,
            format!(
                "triplet is {:?} x {} frames, the model generates {:?} x {}",
                triplet.frame_size, triplet.num_frames, grid.frame_size, grid.num_frames
            ),
        );
    }
    if request.steps == 0 || request.steps > ctx.config.max_steps {
        return error(StatusCode::BAD_REQUEST, format!("steps must be in 1..={}", ctx.config.max_steps));
    }
    let wanted = request.first_frame.iter().chain(triplet.references.iter().map(|r| &r.image_ref));
    let missing: Vec<&String> = wanted.filter(|id| !ctx.assets.contains(id)).collect();
    if !missing.is_empty() {
        return (StatusCode::NOT_FOUND, Json(json!({ "error": "missing assets", "missing": missing }))).into_response();
    }
    match ctx.jobs.submit(request, key) {
        Ok((job_id, how)) => {
            let status = ctx.jobs.get(&job_id).map_or(JobStatus::Queued, |j| j.status);
            let code = if how == Submitted::Created { StatusCode::ACCEPTED } else { StatusCode::OK };
            (code, Json(json!({ "job_id": job_id, "status": status }))).into_response()
        }
        Err(e @ StoreError::IdempotencyConflict(_)) => error(StatusCode::CONFLICT, e.to_string()),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

async fn job_status(State(ctx): Ctx, Path(id): Path<String>) -> Response {
    match ctx.jobs.get(&id) {
        Some(job) => Json(job).into_response(),
        None => error(StatusCode::NOT_FOUND, format!("unknown job {id}")),
    }
}

async fn job_result(State(ctx): Ctx, Path(id): Path<String>) -> Response {
    let Some(job) = ctx.jobs.get(&id) else {
        return error(StatusCode::NOT_FOUND, format!("unknown job {id}"));
    };
    let Some(result) = job.result_ref.filter(|_| job.status == JobStatus::Done) else {
        return (StatusCode::CONFLICT, Json(json!({ "error": "job has no result", "status": job.status }))).into_response();
    };
    match ctx.assets.get(&result) {
        Some(bytes) => ([(header::CONTENT_TYPE, "application/x-tar")], bytes).into_response(),
        None => error(StatusCode::INTERNAL_SERVER_ERROR, "result archive missing from the asset store"),
    }
}

async fn health(State(ctx): Ctx) -> Response {
    Json(json!({ "status": "ok", "jobs": ctx.jobs.counts() })).into_response()
}

async fn config(State(ctx): Ctx) -> Response {
    let m = &ctx.model.config;
    Json(json!({
        "frame_size": m.grid.frame_size,
        "num_frames": m.grid.num_frames,
        "latent_grid": [m.grid.latent_frames(), m.grid.height(), m.grid.width()],
        "channel_layout": CHANNEL_LAYOUT,
        "dim": m.dim,
        "depth": m.depth,
        "heads": m.heads,
        "attention_mode": m.attention_mode,
        "attention_w": m.attention_w,
        "vocabulary": m.vocab.words(),
        "workers": ctx.config.workers,
        "max_asset_bytes": ctx.config.max_asset_bytes,
        "max_steps": ctx.config.max_steps,
        "default_steps": crate::store::DEFAULT_STEPS,
    }))
    .into_response()
}

/// Serves until ctrl-c, running generation workers alongside.
pub async fn serve(ctx: Arc<ServiceContext>, addr: std::net::SocketAddr) -> anyhow::Result<()> {
    let pool = crate::worker::WorkerPool::spawn(Arc::clone(&ctx));
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, data_dir = %ctx.config.data_dir.display(), "listening");
    axum::serve(listener, router(ctx))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    tokio::task::spawn_blocking(move || pool.shutdown()).await?;
    Ok(())
}
