//! Persistent job records and content-addressed assets.
//!
//! Jobs live in one JSON file rewritten atomically on every change; assets
//! are files named by the SHA-256 of their bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Condvar, Mutex, MutexGuard};
use std::time::Duration;

use eventcanvas::synthgen::Background;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const DATA_DIR_ENV: &str = "CANVAS_DATA_DIR";
pub const DEFAULT_DATA_DIR: &str = "canvas-data";
pub const DEFAULT_MAX_ASSET_BYTES: usize = 8 * 1024 * 1024;

/// `CANVAS_DATA_DIR` if set, otherwise `./canvas-data`.
pub fn default_data_dir() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV).map_or_else(|| PathBuf::from(DEFAULT_DATA_DIR), PathBuf::from)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("asset of {size} bytes exceeds the {limit} byte cap")]
    TooLarge { size: usize, limit: usize },
    #[error("unsupported asset: {0}")]
    Unsupported(String),
    #[error("idempotency key {0:?} was used with a different request")]
    IdempotencyConflict(String),
    #[error("unknown job {0:?}")]
    UnknownJob(String),
    #[error("job {job_id:?} cannot move from {from:?} to {to:?}")]
    Transition { job_id: String, from: JobStatus, to: JobStatus },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type StoreResult<T> = std::result::Result<T, StoreError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AssetKind {
    Image,
    Reference,
}

impl std::str::FromStr for AssetKind {
    type Err = StoreError;

    fn from_str(s: &str) -> StoreResult<Self> {
        match s {
            "image" => Ok(Self::Image),
            "reference" => Ok(Self::Reference),
            other => Err(StoreError::Unsupported(format!("asset kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssetInfo {
    pub id: String,
    pub kind: AssetKind,
    pub size: usize,
    pub width: u32,
    pub height: u32,
}

/// MIME type sniffed from the leading bytes of a stored asset.
pub fn content_type(bytes: &[u8]) -> &'static str {
    if bytes.starts_with(b"\x89PNG\r\n\x1a\n") {
        "image/png"
    } else if bytes.starts_with(b"GIF8") {
        "image/gif"
    } else if bytes.len() > 262 && &bytes[257..262] == b"ustar" {
        "application/x-tar"
    } else {
        "application/octet-stream"
    }
}

fn valid_id(id: &str) -> bool {
    id.len() == 64 && id.bytes().all(|b| b.is_ascii_hexdigit() && !b.is_ascii_uppercase())
}

/// Directory of immutable blobs keyed by content hash.
#[derive(Debug, Clone)]
pub struct AssetStore {
    dir: PathBuf,
    max_bytes: usize,
}

impl AssetStore {
    pub fn open(dir: impl Into<PathBuf>, max_bytes: usize) -> StoreResult<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self { dir, max_bytes })
    }

    pub fn max_bytes(&self) -> usize {
        self.max_bytes
    }

    /// Stores an uploaded image. Only PNG is accepted, since inputs must be
    /// lossless.
    pub fn put_image(&self, bytes: &[u8], kind: AssetKind) -> StoreResult<AssetInfo> {
        if bytes.len() > self.max_bytes {
            return Err(StoreError::TooLarge {
                size: bytes.len(),
                limit: self.max_bytes,
            });
        }
        if bytes.is_empty() {
            return Err(StoreError::Unsupported("empty body".into()));
        }
        if content_type(bytes) != "image/png" {
            return Err(StoreError::Unsupported("only PNG images are accepted".into()));
        }
        let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
            .map_err(|e| StoreError::Unsupported(format!("undecodable PNG: {e}")))?;
        let id = self.put_blob(bytes)?;
        Ok(AssetInfo {
            id,
            kind,
            size: bytes.len(),
            width: img.width(),
            height: img.height(),
        })
    }

    /// Stores arbitrary bytes without checks and returns their id.
    pub fn put_blob(&self, bytes: &[u8]) -> StoreResult<String> {
        let id = sha256_hex(bytes);
        let path = self.dir.join(&id);
        if !path.exists() {
            let tmp = self.dir.join(format!("{id}.{}.tmp", uuid::Uuid::new_v4().simple()));
            fs::write(&tmp, bytes)?;
            fs::rename(&tmp, &path)?;
        }
        Ok(id)
    }

    pub fn get(&self, id: &str) -> Option<Vec<u8>> {
        if !valid_id(id) {
            return None;
        }
        fs::read(self.dir.join(id)).ok()
    }

    pub fn contains(&self, id: &str) -> bool {
        valid_id(id) && self.dir.join(id).is_file()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobStatus {
    Queued,
    Running,
    Done,
    Failed,
}

pub const DEFAULT_STEPS: usize = 20;

fn default_steps() -> usize {
    DEFAULT_STEPS
}

/// Body of `POST /jobs/generate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateRequest {
    /// Triplet in its JSON interchange form. Reference `image_ref`s are
    /// asset ids.
    pub triplet: serde_json::Value,
    /// Asset id of the first frame.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub first_frame: Option<String>,
    /// Background rendered as the first frame when no asset is given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene_preset: Option<Background>,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub idempotency_key: Option<String>,
}

impl GenerateRequest {
    /// Hash of the request without its idempotency key.
    pub fn digest(&self) -> String {
        let mut r = self.clone();
        r.idempotency_key = None;
        sha256_hex(&serde_json::to_vec(&r).expect("request serializes"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationJob {
    pub job_id: String,
    pub request: GenerateRequest,
    pub status: JobStatus,
    pub progress: f64,
    /// Asset id of the frame archive, set once done.
    pub result_ref: Option<String>,
    /// Asset id of the animated preview, set once done.
    pub preview_ref: Option<String>,
    pub error_msg: Option<String>,
    pub seq: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Submitted {
    Created,
    Existing,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct StoreState {
    next_seq: u64,
    jobs: BTreeMap<String, GenerationJob>,
    /// Idempotency key to `(job_id, request digest)`.
    keys: BTreeMap<String, (String, String)>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct JobCounts {
    pub queued: usize,
    pub running: usize,
    pub done: usize,
    pub failed: usize,
}

/// Job table persisted to a single JSON file.
#[derive(Debug)]
pub struct JobStore {
    path: PathBuf,
    state: Mutex<StoreState>,
    wake: Condvar,
}

impl JobStore {
    /// Opens or creates the store. Jobs left running by a previous process
    /// go back to the queue.
    pub fn open(path: impl Into<PathBuf>) -> StoreResult<Self> {
        let path = path.into();
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut state: StoreState = match fs::read(&path) {
            Ok(bytes) => serde_json::from_slice(&bytes)?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => StoreState::default(),
            Err(e) => return Err(e.into()),
        };
        let mut requeued = false;
        for job in state.jobs.values_mut() {
            if job.status == JobStatus::Running {
                job.status = JobStatus::Queued;
                job.progress = 0.0;
                requeued = true;
            }
        }
        let store = Self {
            path,
            state: Mutex::new(state),
            wake: Condvar::new(),
        };
        if requeued {
            store.persist(&store.lock())?;
        }
        Ok(store)
    }

    fn lock(&self) -> MutexGuard<'_, StoreState> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn persist(&self, state: &StoreState) -> StoreResult<()> {
        let tmp = self.path.with_extension("json.tmp");
        fs::write(&tmp, serde_json::to_vec(state)?)?;
        fs::rename(&tmp, &self.path)?;
        Ok(())
    }

    /// Queues a job. A repeated idempotency key returns the original job if
    /// the request is identical and conflicts otherwise.
    pub fn submit(&self, request: GenerateRequest, key: Option<String>) -> StoreResult<(String, Submitted)> {
        let digest = request.digest();
        let mut st = self.lock();
        if let Some(k) = &key {
            if let Some((id, d)) = st.keys.get(k) {
                return if *d == digest {
                    Ok((id.clone(), Submitted::Existing))
                } else {
                    Err(StoreError::IdempotencyConflict(k.clone()))
                };
            }
        }
        let job_id = uuid::Uuid::new_v4().simple().to_string();
        let seq = st.next_seq;
        st.next_seq += 1;
        st.jobs.insert(
            job_id.clone(),
            GenerationJob {
                job_id: job_id.clone(),
                request,
                status: JobStatus::Queued,
                progress: 0.0,
                result_ref: None,
                preview_ref: None,
                error_msg: None,
                seq,
            },
        );
        if let Some(k) = key {
            st.keys.insert(k, (job_id.clone(), digest));
        }
        self.persist(&st)?;
        drop(st);
        self.wake.notify_one();
        Ok((job_id, Submitted::Created))
    }

    pub fn get(&self, job_id: &str) -> Option<GenerationJob> {
        self.lock().jobs.get(job_id).cloned()
    }

    pub fn counts(&self) -> JobCounts {
        let mut c = JobCounts::default();
        for j in self.lock().jobs.values() {
            match j.status {
                JobStatus::Queued => c.queued += 1,
                JobStatus::Running => c.running += 1,
                JobStatus::Done => c.done += 1,
                JobStatus::Failed => c.failed += 1,
            }
        }
        c
    }

    /// Marks the oldest queued job running and returns it, waiting up to
    /// `timeout` for one to arrive. Returns `None` on timeout or shutdown.
    pub fn claim_next(&self, shutdown: &AtomicBool, timeout: Duration) -> StoreResult<Option<GenerationJob>> {
        let mut st = self.lock();
        loop {
            if shutdown.load(Ordering::SeqCst) {
                return Ok(None);
            }
            let next = st.jobs.values().filter(|j| j.status == JobStatus::Queued).min_by_key(|j| j.seq).map(|j| j.job_id.clone());
            if let Some(id) = next {
                let job = st.jobs.get_mut(&id).expect("job listed");
                job.status = JobStatus::Running;
                job.progress = 0.0;
                let out = job.clone();
                self.persist(&st)?;
                return Ok(Some(out));
            }
            let (guard, res) = self.wake.wait_timeout(st, timeout).unwrap_or_else(|p| p.into_inner());
            st = guard;
            if res.timed_out() {
                return Ok(None);
            }
        }
    }

    pub fn set_progress(&self, job_id: &str, progress: f64) -> StoreResult<()> {
        let mut st = self.lock();
        let job = st.jobs.get_mut(job_id).ok_or_else(|| StoreError::UnknownJob(job_id.into()))?;
        if job.status != JobStatus::Running {
            return Err(StoreError::Transition {
                job_id: job_id.into(),
                from: job.status,
                to: JobStatus::Running,
            });
        }
        job.progress = progress.clamp(0.0, 1.0);
        self.persist(&st)
    }

    /// Moves a running job to done (with its artifact ids) or failed.
    pub fn finish(&self, job_id: &str, outcome: std::result::Result<(String, String), String>) -> StoreResult<()> {
        let mut st = self.lock();
        let job = st.jobs.get_mut(job_id).ok_or_else(|| StoreError::UnknownJob(job_id.into()))?;
        let to = if outcome.is_ok() { JobStatus::Done } else { JobStatus::Failed };
        if job.status != JobStatus::Running {
            return Err(StoreError::Transition {
                job_id: job_id.into(),
                from: job.status,
                to,
            });
        }
        job.status = to;
        match outcome {
            Ok((result, preview)) => {
                job.progress = 1.0;
                job.result_ref = Some(result);
                job.preview_ref = Some(preview);
            }
            Err(msg) => {
                job.error_msg = Some(if msg.is_empty() { "generation failed".into() } else { msg });
            }
        }
        self.persist(&st)
    }

    /// Wakes all waiting workers, e.g. after setting a shutdown flag.
    pub fn wake_all(&self) {
        self.wake.notify_all();
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}
