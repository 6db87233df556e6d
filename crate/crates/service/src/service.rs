use std::collections::{HashMap, VecDeque};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex, RwLock};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use lams_core::backend::{build_backend, AdapterRegistry, BackendConfig, DiffusionBackend};
use lams_core::eval::{compute_metrics, Providers};
use lams_core::imageio::{decode_image, encode_png, ImageInput};
use lams_core::masking::{
    decode_mask_image, dilate, encode_mask_png, segment, to_latent_resolution, MaskOptions, SegmentationClient,
    StubSegmenter,
};
use lams_core::pipeline::{edit, request_hash, EditContext, EditRequest, FieldError, Progress, Stage};
use lams_core::trajectory::TrajectoryStore;
use serde::Serialize;
use thiserror::Error;

use crate::{
    now_ms, ArtifactStore, HttpSegmenter, JobState, RunLog, RunRecord, RunResult, SegmentationConfig, ServiceConfig,
    ServiceError,
};

#[derive(Debug, Error)]
pub enum SubmitError {
    #[error("invalid request")]
    Invalid(Vec<FieldError>),
    #[error("malformed image: {0}")]
    BadImage(String),
    /// The same request is already queued or running under this id.
    #[error("an identical request is in flight as {0}")]
    Duplicate(String),
    #[error("{0}")]
    Internal(String),
}

#[derive(Debug, Error)]
pub enum MaskPreviewError {
    #[error("{0}")]
    BadRequest(String),
    #[error("{0}")]
    Unavailable(String),
    #[error("{0}")]
    Failed(String),
}

/// Result of segmenting an image without running an edit.
#[derive(Debug, Clone)]
pub struct MaskPreview {
    pub png: Vec<u8>,
    pub instances: usize,
    pub latent_coverage: f64,
    pub warning: Option<String>,
}

#[derive(Debug, Clone, Default)]
pub struct RunQuery {
    pub limit: usize,
    pub offset: usize,
    /// State name such as `done` or `failed`.
    pub state: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct StatusReport {
    pub status: &'static str,
    pub version: &'static str,
    pub backend: String,
    pub workers: usize,
    pub segmentation: bool,
    pub queued: usize,
    pub running: usize,
    pub total: usize,
}

struct Inner {
    config: ServiceConfig,
    artifacts: ArtifactStore,
    runs: RunLog,
    jobs: RwLock<HashMap<String, RunRecord>>,
    queue: Mutex<VecDeque<String>>,
    wake: Condvar,
    shutdown: AtomicBool,
    paused: AtomicBool,
    store: TrajectoryStore,
    segmenter: Option<Arc<dyn SegmentationClient>>,
    /// Used for ids and geometry on the request path; workers own their own.
    probe: Mutex<Box<dyn DiffusionBackend>>,
    backend_id: String,
}

/// Cheaply clonable handle to the job queue and its workers.
#[derive(Clone)]
pub struct Service {
    inner: Arc<Inner>,
    workers: Arc<Mutex<Vec<JoinHandle<()>>>>,
}

/// Parses a JSON edit request, taking sampler fields the body omits from
/// `backend`.
pub fn parse_request(mut body: serde_json::Value, backend: &BackendConfig) -> Result<EditRequest, SubmitError> {
    let Some(obj) = body.as_object_mut() else {
        return Err(SubmitError::Invalid(vec![field("body", "must be a JSON object")]));
    };
    let mut sampler = serde_json::json!({
        "steps": backend.steps,
        "guidance": backend.guidance,
        "inversion_guidance": backend.inversion_guidance,
        "seed": backend.seed,
    });
    if let Some(given) = obj.get("sampler") {
        let Some(given) = given.as_object() else {
            return Err(SubmitError::Invalid(vec![field("sampler", "must be an object")]));
        };
        for (k, v) in given {
            sampler[k] = v.clone();
        }
    }
    obj.insert("sampler".into(), sampler);
    serde_json::from_value(body).map_err(|e| SubmitError::Invalid(vec![serde_field_error(&e.to_string())]))
}

/// The edit context both the service workers and the CLI run with.
pub fn edit_context<'a>(
    config: &ServiceConfig,
    store: &'a TrajectoryStore,
    segmenter: Option<&'a dyn SegmentationClient>,
) -> EditContext<'a> {
    let mut ctx = EditContext::new(store);
    ctx.adapters = AdapterRegistry { dir: config.adapter_dir.clone() };
    ctx.segmenter = segmenter;
    ctx.site_filter = config.site_filter.clone();
    ctx.mask_options = config.mask;
    ctx.base_dir = config.input_dir.clone();
    ctx
}

pub fn build_segmenter(config: &SegmentationConfig) -> Option<Arc<dyn SegmentationClient>> {
    match config {
        SegmentationConfig::None => None,
        SegmentationConfig::Stub { rules } => Some(Arc::new(StubSegmenter::new(rules.clone()))),
        SegmentationConfig::Http { url, timeout_ms } => {
            Some(Arc::new(HttpSegmenter::new(url.clone(), Duration::from_millis(*timeout_ms))))
        }
    }
}

impl Service {
    /// Opens the data directory, re-queues unfinished runs and starts the
    /// workers.
    pub fn start(config: ServiceConfig) -> Result<Self, ServiceError> {
        Self::start_with_segmenter(config.clone(), build_segmenter(&config.segmentation))
    }

    /// [`Service::start`] with an explicit segmentation client.
    pub fn start_with_segmenter(
        config: ServiceConfig,
        segmenter: Option<Arc<dyn SegmentationClient>>,
    ) -> Result<Self, ServiceError> {
        config.validate()?;
        std::fs::create_dir_all(&config.data_dir)?;
        let artifacts = ArtifactStore::open(config.data_dir.join("artifacts"))?;
        let runs = RunLog::open(config.data_dir.join("runs.jsonl"))?;
        let probe = build_backend(&config.backend).map_err(|e| ServiceError::Backend(e.to_string()))?;
        let backend_id = probe.id();

        let mut jobs = HashMap::new();
        let mut pending = Vec::new();
        for mut rec in runs.load()? {
            if !rec.state.is_terminal() {
                rec.state = JobState::Queued;
                rec.updated_ms = now_ms();
                runs.append(&rec)?;
                pending.push((rec.created_ms, rec.id.clone()));
            }
            jobs.insert(rec.id.clone(), rec);
        }
        pending.sort();
        if !pending.is_empty() {
            log::info!("re-queued {} unfinished runs", pending.len());
        }

        let inner = Arc::new(Inner {
            store: TrajectoryStore::new(config.resolved_store()),
            artifacts,
            runs,
            jobs: RwLock::new(jobs),
            queue: Mutex::new(pending.into_iter().map(|(_, id)| id).collect()),
            wake: Condvar::new(),
            shutdown: AtomicBool::new(false),
            paused: AtomicBool::new(false),
            segmenter,
            probe: Mutex::new(probe),
            backend_id,
            config,
        });
        let mut handles = Vec::new();
        for n in 0..inner.config.workers {
            let backend = build_backend(&inner.config.backend).map_err(|e| ServiceError::Backend(e.to_string()))?;
            let inner = Arc::clone(&inner);
            let handle = std::thread::Builder::new()
                .name(format!("lams-worker-{n}"))
                .spawn(move || worker_loop(&inner, backend))?;
            handles.push(handle);
        }
        Ok(Self { inner, workers: Arc::new(Mutex::new(handles)) })
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.inner.config
    }

    pub fn artifacts(&self) -> &ArtifactStore {
        &self.inner.artifacts
    }

    pub fn backend_id(&self) -> &str {
        &self.inner.backend_id
    }

    /// Stops the workers after their current job. Unstarted jobs stay queued
    /// in the run log and resume on the next start.
    pub fn shutdown(&self) {
        let queue = self.inner.queue.lock().unwrap_or_else(|p| p.into_inner());
        self.inner.shutdown.store(true, Ordering::SeqCst);
        drop(queue);
        self.inner.wake.notify_all();
        let handles: Vec<_> = self.workers.lock().unwrap_or_else(|p| p.into_inner()).drain(..).collect();
        for h in handles {
            let _ = h.join();
        }
    }

    /// Workers finish their current job and then take no new ones until
    /// [`Service::resume`]. Submissions are still accepted.
    pub fn pause(&self) {
        self.inner.paused.store(true, Ordering::SeqCst);
    }

    pub fn resume(&self) {
        // Take the queue lock so a worker between its check and its wait
        // cannot miss the wakeup.
        let _queue = self.inner.queue.lock().unwrap_or_else(|p| p.into_inner());
        self.inner.paused.store(false, Ordering::SeqCst);
        self.inner.wake.notify_all();
    }

    /// [`parse_request`] with this service's backend defaults.
    pub fn parse_request(&self, body: serde_json::Value) -> Result<EditRequest, SubmitError> {
        parse_request(body, &self.inner.config.backend)
    }

    /// Validates and enqueues `request`, returning the job id.
    ///
    /// The input image (and user mask) are stored as artifacts and the
    /// recorded request points at them, so a restart can re-run the job.
    pub fn submit(&self, mut request: EditRequest) -> Result<String, SubmitError> {
        let errs = request.validate();
        if !errs.is_empty() {
            return Err(SubmitError::Invalid(errs));
        }
        let base = self.inner.config.input_dir.as_deref();
        let bytes = request.image.bytes(base).map_err(|e| SubmitError::BadImage(e.to_string()))?;
        let image = decode_image(&bytes).map_err(|e| SubmitError::BadImage(e.to_string()))?;
        let (_, h, w) = image.dim();
        self.lock_probe().latent_shape(h, w).map_err(|e| SubmitError::Invalid(vec![field("image", &e.to_string())]))?;
        let mask_png = match &request.mask {
            Some(m) => {
                let raw = m.bytes(base).map_err(|e| SubmitError::Invalid(vec![field("mask", &e.to_string())]))?;
                let bin =
                    decode_mask_image(&raw).map_err(|e| SubmitError::Invalid(vec![field("mask", &e.to_string())]))?;
                if bin.dim() != (h, w) {
                    let msg = format!("mask is {}x{}, image is {h}x{w}", bin.nrows(), bin.ncols());
                    return Err(SubmitError::Invalid(vec![field("mask", &msg)]));
                }
                Some(encode_mask_png(&bin).map_err(|e| SubmitError::Internal(e.to_string()))?)
            }
            None => None,
        };
        let hash = request_hash(&request, &image, None, &self.inner.backend_id);

        // 8-bit RGB survives PNG re-encoding exactly, so the stored input
        // decodes to the same array as the upload.
        let png = encode_png(&image).map_err(|e| SubmitError::BadImage(e.to_string()))?;
        let input = self.inner.artifacts.put_png(&png).map_err(internal)?;
        request.image = ImageInput::Path(self.inner.artifacts.path(&input.sha256).display().to_string());
        if let Some(m) = mask_png {
            let r = self.inner.artifacts.put_png(&m).map_err(internal)?;
            request.mask = Some(ImageInput::Path(self.inner.artifacts.path(&r.sha256).display().to_string()));
        }

        let record = {
            let mut jobs = self.inner.jobs.write().unwrap_or_else(|p| p.into_inner());
            if let Some(existing) = jobs.values().find(|r| r.request_hash == hash && !r.state.is_terminal()) {
                return Err(SubmitError::Duplicate(existing.id.clone()));
            }
            let mut record = RunRecord::new(String::new(), request, hash.clone(), self.inner.backend_id.clone());
            let mut id = format!("{}-{}", &hash[..16], record.created_ms);
            let mut n = 1;
            while jobs.contains_key(&id) {
                id = format!("{}-{}-{n}", &hash[..16], record.created_ms);
                n += 1;
            }
            record.id = id;
            record.input = Some(input);
            jobs.insert(record.id.clone(), record.clone());
            record
        };
        self.inner.runs.append(&record).map_err(internal)?;
        self.inner.queue.lock().unwrap_or_else(|p| p.into_inner()).push_back(record.id.clone());
        self.inner.wake.notify_one();
        log::info!("queued {}", record.id);
        Ok(record.id)
    }

    pub fn get(&self, id: &str) -> Option<RunRecord> {
        self.inner.jobs.read().unwrap_or_else(|p| p.into_inner()).get(id).cloned()
    }

    /// Polls until the job is done or failed.
    pub fn wait(&self, id: &str, timeout: Duration) -> Option<RunRecord> {
        let deadline = Instant::now() + timeout;
        loop {
            let rec = self.get(id)?;
            if rec.state.is_terminal() || Instant::now() >= deadline {
                return Some(rec);
            }
            std::thread::sleep(Duration::from_millis(10));
        }
    }

    /// Newest first, with the total count matching the filter.
    pub fn list(&self, query: &RunQuery) -> (Vec<RunRecord>, usize) {
        let jobs = self.inner.jobs.read().unwrap_or_else(|p| p.into_inner());
        let mut all: Vec<&RunRecord> =
            jobs.values().filter(|r| query.state.as_deref().is_none_or(|s| r.state.name() == s)).collect();
        all.sort_by(|a, b| b.created_ms.cmp(&a.created_ms).then_with(|| b.id.cmp(&a.id)));
        let total = all.len();
        (all.into_iter().skip(query.offset).take(query.limit).cloned().collect(), total)
    }

    pub fn status(&self) -> StatusReport {
        let jobs = self.inner.jobs.read().unwrap_or_else(|p| p.into_inner());
        let count = |f: fn(&JobState) -> bool| jobs.values().filter(|r| f(&r.state)).count();
        StatusReport {
            status: "ok",
            version: env!("CARGO_PKG_VERSION"),
            backend: self.inner.backend_id.clone(),
            workers: self.inner.config.workers,
            segmentation: self.inner.segmenter.is_some(),
            queued: count(|s| matches!(s, JobState::Queued)),
            running: count(|s| matches!(s, JobState::Inverting | JobState::Denoising { .. })),
            total: jobs.len(),
        }
    }

    /// Segments `image_bytes` for `prompt` and returns the image-resolution
    /// mask as a 1-bit PNG. Blocks on the segmentation client.
    pub fn preview_mask(
        &self,
        image_bytes: &[u8],
        prompt: &str,
        options: MaskOptions,
    ) -> Result<MaskPreview, MaskPreviewError> {
        if prompt.trim().is_empty() {
            return Err(MaskPreviewError::BadRequest("mask_prompt must be non-empty".into()));
        }
        let image = decode_image(image_bytes).map_err(|e| MaskPreviewError::BadRequest(format!("image: {e}")))?;
        let (_, h, w) = image.dim();
        let latent = self.lock_probe().latent_shape(h, w).map_err(|e| MaskPreviewError::BadRequest(e.to_string()))?;
        let client = self
            .inner
            .segmenter
            .as_deref()
            .ok_or_else(|| MaskPreviewError::Unavailable("no segmentation client is configured".into()))?;
        let seg = segment(&image, prompt, client, options.policy).map_err(|e| {
            if e.is_retryable() {
                MaskPreviewError::Unavailable(e.to_string())
            } else {
                MaskPreviewError::Failed(e.to_string())
            }
        })?;
        let small = to_latent_resolution(&seg.mask, [latent[1], latent[2]])
            .map_err(|e| MaskPreviewError::Failed(e.to_string()))?;
        let small = dilate(&small, options.dilation);
        let latent_coverage = small.iter().map(|&v| f64::from(v)).sum::<f64>() / small.len() as f64;
        let png = encode_mask_png(&seg.mask).map_err(|e| MaskPreviewError::Failed(e.to_string()))?;
        Ok(MaskPreview { png, instances: seg.instances, latent_coverage, warning: seg.warning })
    }

    fn lock_probe(&self) -> std::sync::MutexGuard<'_, Box<dyn DiffusionBackend>> {
        self.inner.probe.lock().unwrap_or_else(|p| p.into_inner())
    }
}

fn internal(e: impl std::fmt::Display) -> SubmitError {
    SubmitError::Internal(e.to_string())
}

fn field(name: &str, message: &str) -> FieldError {
    FieldError { field: name.into(), message: message.into() }
}

/// Maps a serde message such as "missing field `x` at line 1" onto `x`.
fn serde_field_error(message: &str) -> FieldError {
    let name = ["missing field `", "unknown field `", "duplicate field `"]
        .iter()
        .find_map(|p| message.split_once(p).and_then(|(_, rest)| rest.split_once('`')).map(|(f, _)| f.to_string()))
        .unwrap_or_else(|| "body".into());
    FieldError { field: name, message: message.to_string() }
}

impl Inner {
    /// Moves `id` forward to `state`; backward moves are ignored.
    fn advance(&self, id: &str, state: JobState, result: Option<RunResult>, persist: bool) {
        let record = {
            let mut jobs = self.jobs.write().unwrap_or_else(|p| p.into_inner());
            let Some(rec) = jobs.get_mut(id) else { return };
            if !rec.state.can_advance_to(&state) {
                return;
            }
            rec.state = state;
            rec.updated_ms = now_ms();
            if result.is_some() {
                rec.result = result;
            }
            rec.clone()
        };
        if persist {
            if let Err(e) = self.runs.append(&record) {
                log::error!("{}: cannot append run record: {e}", self.runs.path().display());
            }
        }
    }

    fn next_job(&self) -> Option<String> {
        let mut queue = self.queue.lock().unwrap_or_else(|p| p.into_inner());
        loop {
            if self.shutdown.load(Ordering::SeqCst) {
                return None;
            }
            if !self.paused.load(Ordering::SeqCst) {
                if let Some(id) = queue.pop_front() {
                    return Some(id);
                }
            }
            queue = self.wake.wait(queue).unwrap_or_else(|p| p.into_inner());
        }
    }

    fn run(&self, id: &str, backend: &mut dyn DiffusionBackend) -> Result<RunResult, (String, String, bool)> {
        let request = self.jobs.read().unwrap_or_else(|p| p.into_inner()).get(id).map(|r| r.request.clone());
        let Some(request) = request else {
            return Err(("load".into(), "job vanished".into(), false));
        };
        let ctx = edit_context(&self.config, &self.store, self.segmenter.as_deref());

        let mut on_progress = |p: Progress| match p {
            Progress::Stage { stage: Stage::Invert } => self.advance(id, JobState::Inverting, None, true),
            Progress::Iteration { iteration, total } => {
                self.advance(id, JobState::Denoising { iteration, total }, None, false)
            }
            Progress::Stage { .. } => {}
        };
        let out = edit(&request, backend, &ctx, &mut on_progress).map_err(|e| {
            let stage = e.stage().map_or_else(|| "request".to_string(), |s| s.to_string());
            (stage, e.to_string(), e.is_retryable())
        })?;

        let store = |png: Result<Vec<u8>, String>| {
            png.and_then(|b| self.artifacts.put_png(&b).map_err(|e| e.to_string()))
                .map_err(|e| ("decode".to_string(), e, false))
        };
        let edited = store(encode_png(&out.edited).map_err(|e| e.to_string()))?;
        let reconstruction = store(encode_png(&out.reconstruction).map_err(|e| e.to_string()))?;
        let mask = match &out.mask {
            Some(m) => Some(store(encode_mask_png(&m.image).map_err(|e| e.to_string()))?),
            None => None,
        };
        let original =
            request.image.load(ctx.base_dir.as_deref()).map_err(|e| ("load".to_string(), e.to_string(), false))?;
        let metrics = compute_metrics(&original, &out.edited, &request.target_prompt, &Providers::stubs());
        Ok(RunResult { edited, reconstruction, mask, summary: out.summary, metrics })
    }
}

fn worker_loop(inner: &Inner, mut backend: Box<dyn DiffusionBackend>) {
    while let Some(id) = inner.next_job() {
        log::info!("running {id}");
        match inner.run(&id, &mut *backend) {
            Ok(result) => inner.advance(&id, JobState::Done, Some(result), true),
            Err((stage, message, retryable)) => {
                log::warn!("{id} failed at {stage}: {message}");
                inner.advance(&id, JobState::Failed { stage, message, retryable }, None, true);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn serde_messages_name_the_field() {
        assert_eq!(serde_field_error("missing field `target_prompt` at line 1 column 2").field, "target_prompt");
        assert_eq!(serde_field_error("unknown field `colour`, expected one of").field, "colour");
        assert_eq!(serde_field_error("invalid type: integer").field, "body");
    }
}
