//! Drives the HTTP API in-process: uploads a clip's first frame and
//! reference images, submits a generation job, polls it and downloads the
//! frame archive.
//!
//! `cargo run --release -p eventcanvas-service --example http_jobs`

use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::Request;
use axum::Router;
use eventcanvas::model::{Model, ModelConfig};
use eventcanvas::synthgen::{load_dataset, make_dataset};
use eventcanvas::triplet::emit_triplet;
use eventcanvas_service::api::router;
use eventcanvas_service::artifacts::{png_bytes, read_frames_archive};
use eventcanvas_service::worker::{ServiceConfig, ServiceContext, WorkerPool};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

async fn call(app: &Router, req: Request<Body>) -> anyhow::Result<(u16, Vec<u8>)> {
    let resp = app.clone().oneshot(req).await?;
    let status = resp.status().as_u16();
    Ok((status, resp.into_body().collect().await?.to_bytes().to_vec()))
}

async fn upload(app: &Router, png: Vec<u8>, kind: &str) -> anyhow::Result<String> {
    let (status, body) = call(app, Request::post(format!("/assets?kind={kind}")).body(Body::from(png))?).await?;
    let v: Value = serde_json::from_slice(&body)?;
    println!("POST /assets?kind={kind} -> {status} {}", v["id"]);
    Ok(v["id"].as_str().unwrap_or_default().to_owned())
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    let root = std::env::temp_dir().join("eventcanvas-http-jobs");
    let _ = std::fs::remove_dir_all(&root);
    make_dataset(1, 5, &root.join("data"))?;
    let clip = load_dataset(&root.join("data"))?.load_clip(0)?;

    // A small untrained model keeps the example fast.
    let mut cfg = ModelConfig::desk_default();
    cfg.dim = 32;
    cfg.depth = 2;
    cfg.heads = 2;
    cfg.text_dim = 16;
    let ctx = Arc::new(ServiceContext::open(ServiceConfig::new(root.join("store")), Model::new(cfg, 0)?)?);
    let app = router(Arc::clone(&ctx));
    let pool = WorkerPool::spawn(Arc::clone(&ctx));

    let frame_id = upload(&app, png_bytes(&clip.frames[0])?, "image").await?;
    let mut triplet = clip.triplet.clone();
    for r in &mut triplet.references {
        let mut png = Vec::new();
        clip.references[&r.image_ref].write_to(&mut std::io::Cursor::new(&mut png), image::ImageFormat::Png)?;
        r.image_ref = upload(&app, png, "reference").await?;
    }

    let request = json!({
        "triplet": serde_json::from_slice::<Value>(&emit_triplet(&triplet))?,
        "first_frame": frame_id,
        "steps": 10,
        "seed": 3,
    });
    let post = Request::post("/jobs/generate")
        .header("content-type", "application/json")
        .header("idempotency-key", "example-1")
        .body(Body::from(serde_json::to_vec(&request)?))?;
    let (status, body) = call(&app, post).await?;
    let job_id = serde_json::from_slice::<Value>(&body)?["job_id"].as_str().unwrap_or_default().to_owned();
    println!("POST /jobs/generate -> {status} {job_id}");

    let job = loop {
        let (_, body) = call(&app, Request::get(format!("/jobs/{job_id}")).body(Body::empty())?).await?;
        let job: Value = serde_json::from_slice(&body)?;
        println!("GET /jobs/{job_id} -> {} {:.2}", job["status"], job["progress"].as_f64().unwrap_or(0.0));
        if job["status"] == "done" || job["status"] == "failed" {
            break job;
        }
        tokio::time::sleep(Duration::from_millis(250)).await;
    };
    pool.shutdown();
    anyhow::ensure!(job["status"] == "done", "job failed: {}", job["error_msg"]);

    let (status, archive) = call(&app, Request::get(format!("/jobs/{job_id}/result")).body(Body::empty())?).await?;
    let frames = read_frames_archive(&archive)?;
    println!("GET /jobs/{job_id}/result -> {status}, {} bytes, {} frames", archive.len(), frames.len());
    println!("preview GIF asset: {}", job["preview_ref"]);
    Ok(())
}
