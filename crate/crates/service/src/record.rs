//! The persisted run record, shared by the service and the CLI sidecar.

use std::time::{SystemTime, UNIX_EPOCH};

use lams_core::eval::Metrics;
use lams_core::pipeline::{EditRequest, EditSummary};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const RECORD_SCHEMA: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Inverting,
    Denoising { iteration: usize, total: usize },
    Done,
    Failed { stage: String, message: String, retryable: bool },
}

impl JobState {
    pub fn name(&self) -> &'static str {
        match self {
            JobState::Queued => "queued",
            JobState::Inverting => "inverting",
            JobState::Denoising { .. } => "denoising",
            JobState::Done => "done",
            JobState::Failed { .. } => "failed",
        }
    }

    pub fn is_terminal(&self) -> bool {
        matches!(self, JobState::Done | JobState::Failed { .. })
    }

    /// Position in the forward-only lifecycle; denoising orders by iteration.
    pub fn rank(&self) -> (u8, usize) {
        match self {
            JobState::Queued => (0, 0),
            JobState::Inverting => (1, 0),
            JobState::Denoising { iteration, .. } => (2, *iteration),
            JobState::Done | JobState::Failed { .. } => (3, 0),
        }
    }

    /// Whether moving from `self` to `next` goes forward.
    pub fn can_advance_to(&self, next: &JobState) -> bool {
        !self.is_terminal() && next.rank() > self.rank()
    }
}

/// A content-addressed file under the artifact directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRef {
    pub sha256: String,
    pub media_type: String,
    pub bytes: u64,
}

impl ArtifactRef {
    pub fn png(bytes: &[u8]) -> Self {
        Self { sha256: hex::encode(Sha256::digest(bytes)), media_type: "image/png".into(), bytes: bytes.len() as u64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub edited: ArtifactRef,
    pub reconstruction: ArtifactRef,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<ArtifactRef>,
    pub summary: EditSummary,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub schema: u32,
    pub id: String,
    /// Request with its image (and mask) rewritten to stored inputs.
    pub request: EditRequest,
    pub request_hash: String,
    pub backend: String,
    #[serde(flatten)]
    pub state: JobState,
    pub created_ms: u64,
    pub updated_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<ArtifactRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<RunResult>,
}

impl RunRecord {
    pub fn new(id: String, request: EditRequest, request_hash: String, backend: String) -> Self {
        let now = now_ms();
        Self {
            schema: RECORD_SCHEMA,
            id,
            request,
            request_hash,
            backend,
            state: JobState::Queued,
            created_ms: now,
            updated_ms: now,
            input: None,
            result: None,
        }
    }
}

pub fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}
