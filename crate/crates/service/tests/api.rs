use std::collections::HashMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use eventcanvas::attention::AttentionMode;
use eventcanvas::condition::{LatentGrid, LATENT_CHANNELS};
use eventcanvas::model::{Model, ModelConfig};
use eventcanvas::synthgen::caption_vocabulary;
use eventcanvas::triplet::{emit_triplet, BBox, Caption, MultimodalTriplet, Point, ReferencePlacement, TrajectoryTrack};
use eventcanvas_service::api::router;
use eventcanvas_service::artifacts::{generate_video, png_bytes, read_frames_archive};
use eventcanvas_service::store::{GenerationJob, JobStatus};
use eventcanvas_service::worker::{ServiceConfig, ServiceContext, WorkerPool};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn tiny_model() -> Model {
    let config = ModelConfig {
        grid: LatentGrid::new((32, 32), 5, 8, 4).unwrap(),
        latent_channels: LATENT_CHANNELS,
        dim: 16,
        depth: 1,
        heads: 2,
        mlp_ratio: 2,
        text_dim: 8,
        vocab: caption_vocabulary(),
        attention_mode: AttentionMode::Weighted,
        attention_w: 30.0,
        heatmap_sigma: 1.5,
    };
    Model::new(config, 3).unwrap()
}

fn triplet() -> MultimodalTriplet {
    let mut t = MultimodalTriplet::new((32, 32), 5);
    let points = (0..5).map(|i| Point::new(8.0 + 4.0 * i as f32, 16.0)).collect();
    t.push_foreground(TrajectoryTrack::new("o0", points, vec![true; 5]), BBox::new(8.0, 16.0, 8.0, 8.0), Caption::new("the red square moves right", "the red square"));
    t
}

fn triplet_json(t: &MultimodalTriplet) -> Value {
    serde_json::from_slice(&emit_triplet(t)).unwrap()
}

struct Harness {
    _dir: tempfile::TempDir,
    ctx: Arc<ServiceContext>,
    app: Router,
}

fn harness_at(dir: tempfile::TempDir, max_asset_bytes: usize) -> Harness {
    let mut config = ServiceConfig::new(dir.path());
    config.max_asset_bytes = max_asset_bytes;
    let ctx = Arc::new(ServiceContext::open(config, tiny_model()).unwrap());
    let app = router(Arc::clone(&ctx));
    Harness { _dir: dir, ctx, app }
}

fn harness() -> Harness {
    harness_at(tempfile::tempdir().unwrap(), 1 << 20)
}

async fn call(app: &Router, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let body = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, body)
}

async fn get(app: &Router, uri: &str) -> (StatusCode, Vec<u8>) {
    call(app, Request::get(uri).body(Body::empty()).unwrap()).await
}

async fn post_json(app: &Router, uri: &str, body: &Value, key: Option<&str>) -> (StatusCode, Value) {
    let mut req = Request::post(uri).header("content-type", "application/json");
    if let Some(k) = key {
        req = req.header("idempotency-key", k);
    }
    let (s, b) = call(app, req.body(Body::from(serde_json::to_vec(body).unwrap())).unwrap()).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

async fn upload(app: &Router, bytes: Vec<u8>, kind: &str) -> (StatusCode, Value) {
    let (s, b) = call(app, Request::post(format!("/assets?kind={kind}")).body(Body::from(bytes)).unwrap()).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

fn frame_png() -> Vec<u8> {
    png_bytes(&image::RgbImage::from_pixel(32, 32, image::Rgb([30, 30, 40]))).unwrap()
}

async fn wait_terminal(app: &Router, id: &str) -> GenerationJob {
    let start = Instant::now();
    loop {
        let (s, b) = get(app, &format!("/jobs/{id}")).await;
        assert_eq!(s, StatusCode::OK);
        let job: GenerationJob = serde_json::from_slice(&b).unwrap();
        if matches!(job.status, JobStatus::Done | JobStatus::Failed) {
            return job;
        }
        assert!(start.elapsed() < Duration::from_secs(60), "job did not finish");
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
}

#[tokio::test]
async fn health_and_config() {
    let h = harness();
    let (s, b) = get(&h.app, "/health").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(serde_json::from_slice::<Value>(&b).unwrap()["status"], "ok");
    let (s, b) = get(&h.app, "/config").await;
    assert_eq!(s, StatusCode::OK);
    let cfg: Value = serde_json::from_slice(&b).unwrap();
    assert_eq!(cfg["attention_mode"], "weighted");
    assert_eq!(cfg["attention_w"], 30.0);
    assert_eq!(cfg["num_frames"], 5);
}

#[tokio::test]
async fn assets_are_content_addressed() {
    let h = harness_at(tempfile::tempdir().unwrap(), 4096);
    let png = frame_png();
    let (s1, a) = upload(&h.app, png.clone(), "image").await;
    let (s2, b) = upload(&h.app, png.clone(), "reference").await;
    assert_eq!((s1, s2), (StatusCode::CREATED, StatusCode::CREATED));
    assert_eq!(a["id"], b["id"]);
    let (s, body) = get(&h.app, &format!("/assets/{}", a["id"].as_str().unwrap())).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(body, png);

    assert_eq!(upload(&h.app, Vec::new(), "image").await.0, StatusCode::UNSUPPORTED_MEDIA_TYPE);
    assert_eq!(upload(&h.app, b"not an image".to_vec(), "image").await.0, StatusCode::UNSUPPORTED_MEDIA_TYPE);
    assert_eq!(upload(&h.app, vec![0u8; 5000], "image").await.0, StatusCode::PAYLOAD_TOO_LARGE);
    assert_eq!(upload(&h.app, png, "video").await.0, StatusCode::BAD_REQUEST);
    assert_eq!(get(&h.app, "/assets/deadbeef").await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn submission_validation() {
    let h = harness();
    let t = triplet();
    let req = json!({ "triplet": triplet_json(&t), "steps": 2, "seed": 1 });
    let (s, body) = post_json(&h.app, "/jobs/generate", &req, None).await;
    assert_eq!(s, StatusCode::ACCEPTED);
    let id = body["job_id"].as_str().unwrap().to_owned();
    let (s, b) = get(&h.app, &format!("/jobs/{id}")).await;
    assert_eq!(s, StatusCode::OK);
    let job: GenerationJob = serde_json::from_slice(&b).unwrap();
    assert_eq!((job.status, job.progress, job.result_ref), (JobStatus::Queued, 0.0, None));
    assert_eq!(get(&h.app, "/jobs/nope").await.0, StatusCode::NOT_FOUND);
    assert_eq!(get(&h.app, &format!("/jobs/{id}/result")).await.0, StatusCode::CONFLICT);

    // Lengths disagree: the body is the validation report.
    let mut bad = triplet_json(&t);
    bad["tracks"][0]["visibility"].as_array_mut().unwrap().pop();
    let (s, body) = post_json(&h.app, "/jobs/generate", &json!({ "triplet": bad }), None).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let kinds: Vec<&str> = body["violations"].as_array().unwrap().iter().map(|v| v["kind"].as_str().unwrap()).collect();
    assert!(kinds.contains(&"length_mismatch"), "{body}");

    let missing = json!({ "triplet": triplet_json(&t), "first_frame": "a".repeat(64) });
    assert_eq!(post_json(&h.app, "/jobs/generate", &missing, None).await.0, StatusCode::NOT_FOUND);

    let wrong_size = json!({ "triplet": triplet_json(&MultimodalTriplet::new((64, 64), 5)) });
    assert_eq!(post_json(&h.app, "/jobs/generate", &wrong_size, None).await.0, StatusCode::BAD_REQUEST);
    let zero_steps = json!({ "triplet": triplet_json(&t), "steps": 0 });
    assert_eq!(post_json(&h.app, "/jobs/generate", &zero_steps, None).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(call(&h.app, Request::post("/jobs/generate").body(Body::from("{")).unwrap()).await.0, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn idempotency_keys() {
    let h = harness();
    let req = json!({ "triplet": triplet_json(&triplet()), "steps": 2, "seed": 1 });
    let (s1, a) = post_json(&h.app, "/jobs/generate", &req, Some("abc")).await;
    let (s2, b) = post_json(&h.app, "/jobs/generate", &req, Some("abc")).await;
    assert_eq!(s1, StatusCode::ACCEPTED);
    assert!(s2.is_success());
    assert_eq!(a["job_id"], b["job_id"]);
    let mut body_key = req.clone();
    body_key["idempotency_key"] = json!("abc");
    assert_eq!(post_json(&h.app, "/jobs/generate", &body_key, None).await.1["job_id"], a["job_id"]);
    let other = json!({ "triplet": triplet_json(&triplet()), "steps": 3 });
    assert_eq!(post_json(&h.app, "/jobs/generate", &other, Some("abc")).await.0, StatusCode::CONFLICT);
}

#[tokio::test]
async fn jobs_run_to_completion_with_cli_identical_output() {
    let h = harness();
    let (_, frame) = upload(&h.app, frame_png(), "image").await;
    let reference = image::RgbaImage::from_pixel(8, 8, image::Rgba([255, 0, 0, 255]));
    let mut ref_png = Vec::new();
    reference.write_to(&mut std::io::Cursor::new(&mut ref_png), image::ImageFormat::Png).unwrap();
    let (_, r) = upload(&h.app, ref_png, "reference").await;
    let mut t = triplet();
    t.references.push(ReferencePlacement {
        image_ref: r["id"].as_str().unwrap().into(),
        target_bbox: BBox::new(8.0, 16.0, 8.0, 8.0),
        rotation: 0.0,
        track_id: Some("o0".into()),
    });
    let req = json!({ "triplet": triplet_json(&t), "first_frame": frame["id"], "steps": 3, "seed": 7 });
    let (s, body) = post_json(&h.app, "/jobs/generate", &req, None).await;
    assert_eq!(s, StatusCode::ACCEPTED, "{body}");
    let id = body["job_id"].as_str().unwrap().to_owned();

    let pool = WorkerPool::spawn(Arc::clone(&h.ctx));
    let job = wait_terminal(&h.app, &id).await;
    pool.shutdown();
    assert_eq!(job.status, JobStatus::Done, "{:?}", job.error_msg);
    assert_eq!(job.progress, 1.0);
    let (_, again) = get(&h.app, &format!("/jobs/{id}")).await;
    assert_eq!(serde_json::from_slice::<GenerationJob>(&again).unwrap(), job);

    let (s, archive) = get(&h.app, &format!("/jobs/{id}/result")).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(read_frames_archive(&archive).unwrap().len(), 5);
    let (s, preview) = get(&h.app, &format!("/assets/{}", job.preview_ref.unwrap())).await;
    assert_eq!(s, StatusCode::OK);
    assert!(preview.starts_with(b"GIF8"));

    // The same inputs through the library path give the same bytes.
    let first = image::load_from_memory(&frame_png()).unwrap().to_rgb8();
    let mut refs = HashMap::new();
    refs.insert(t.references[0].image_ref.clone(), reference);
    let direct = generate_video(&h.ctx.model, &t, &first, &refs, 3, 7, &mut |_, _| {}).unwrap();
    assert_eq!(direct.archive, archive);
}

#[tokio::test]
async fn failures_carry_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let h = harness_at(dir, 1 << 20);
    let (_, frame) = upload(&h.app, frame_png(), "image").await;
    let req = json!({ "triplet": triplet_json(&triplet()), "first_frame": frame["id"], "steps": 2 });
    let (_, body) = post_json(&h.app, "/jobs/generate", &req, None).await;
    std::fs::remove_file(root.join("assets").join(frame["id"].as_str().unwrap())).unwrap();
    let pool = WorkerPool::spawn(Arc::clone(&h.ctx));
    let job = wait_terminal(&h.app, body["job_id"].as_str().unwrap()).await;
    pool.shutdown();
    assert_eq!(job.status, JobStatus::Failed);
    assert!(job.error_msg.unwrap().contains("missing asset"));
    assert!(job.result_ref.is_none());
}

#[tokio::test]
async fn restart_requeues_running_jobs() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let h = harness_at(dir, 1 << 20);
    let req = json!({ "triplet": triplet_json(&triplet()), "steps": 2, "scene_preset": { "kind": "solid", "color": [10, 20, 30] } });
    let (_, body) = post_json(&h.app, "/jobs/generate", &req, None).await;
    let id = body["job_id"].as_str().unwrap().to_owned();
    let stop = std::sync::atomic::AtomicBool::new(false);
    let claimed = h.ctx.jobs.claim_next(&stop, Duration::from_millis(10)).unwrap().unwrap();
    assert_eq!(claimed.status, JobStatus::Running);

    // Simulate a crash: a second process opens the same store.
    let ctx = Arc::new(ServiceContext::open(ServiceConfig::new(&root), tiny_model()).unwrap());
    assert_eq!(ctx.jobs.get(&id).unwrap().status, JobStatus::Queued);
    let app = router(Arc::clone(&ctx));
    let pool = WorkerPool::spawn(Arc::clone(&ctx));
    let job = wait_terminal(&app, &id).await;
    pool.shutdown();
    assert_eq!(job.status, JobStatus::Done);
    drop(h);
}
