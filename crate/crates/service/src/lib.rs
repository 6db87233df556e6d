//! HTTP job service for text-guided edits.
//!
//! Jobs are queued in memory and run by one worker thread per backend
//! instance. Every state change that matters after a restart is appended to
//! `runs.jsonl` under the data directory; images are stored
//! content-addressed next to it.

mod api;
mod artifacts;
mod config;
mod record;
mod runs;
mod segmentation;
mod service;

use thiserror::Error;

pub use api::{router, serve, spawn};
pub use artifacts::ArtifactStore;
pub use config::{SegmentationConfig, ServiceConfig};
pub use record::{now_ms, ArtifactRef, JobState, RunRecord, RunResult, RECORD_SCHEMA};
pub use runs::RunLog;
pub use segmentation::{HttpSegmenter, SegmentationRequest};
pub use service::{
    build_segmenter, edit_context, parse_request, MaskPreview, MaskPreviewError, RunQuery, Service, StatusReport,
    SubmitError,
};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("invalid service config: {0}")]
    Config(String),
    #[error("backend: {0}")]
    Backend(String),
    #[error("corrupt run log {path} line {line}: {message}")]
    RunLog { path: String, line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
