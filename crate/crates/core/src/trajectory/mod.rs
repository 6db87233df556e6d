//! Inversion- and generation-side trajectories of latents and attention maps.
//!
//! A [`Trajectory`] maps timesteps to immutable payloads. Entries stay
//! resident until the owning [`TrajectoryStore`]'s memory budget is
//! exhausted; later entries are spilled to one file per step and read back
//! bit-identically. The store also memoizes completed inversions under a
//! content key, optionally persisting them to a cache directory.

mod snapshot;
mod spill;

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use snapshot::{softmax_rows, AttentionSnapshot, SiteFilter, SiteInfo, SiteKind};
pub use spill::{read_step, write_step, Payload, Precision, StepHeader};

use crate::tensor::Latent;

#[derive(Debug, Error)]
pub enum TrajectoryError {
    #[error("timestep {0} already recorded")]
    Duplicate(usize),
    #[error("timestep {0} not present")]
    Missing(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("attention rows are not stochastic (max row-sum error {0:e})")]
    NotStochastic(f64),
    #[error("corrupt trajectory file: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Inversion,
    Generation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMeta {
    pub direction: Direction,
    pub prompt_fingerprint: String,
    pub seed: u64,
    pub steps: usize,
}

enum Slot<P> {
    Resident(Arc<P>),
    Spilled(PathBuf),
}

struct Budget {
    limit: usize,
    used: AtomicUsize,
}

impl Budget {
    /// Reserves `bytes` if they fit.
    fn try_reserve(&self, bytes: usize) -> bool {
        self.used
            .fetch_update(Ordering::AcqRel, Ordering::Acquire, |used| {
                used.checked_add(bytes).filter(|&n| n <= self.limit)
            })
            .is_ok()
    }

    fn release(&self, bytes: usize) {
        self.used.fetch_sub(bytes, Ordering::AcqRel);
    }
}

/// Ordered `t -> payload` map with transparent spilling.
pub struct Trajectory<P: Payload> {
    meta: TrajectoryMeta,
    signature: Option<String>,
    entries: BTreeMap<usize, Slot<P>>,
    precision: Precision,
    budget: Arc<Budget>,
    resident_bytes: usize,
    spill_dir: Option<PathBuf>,
    owns_spill_dir: bool,
}

pub type LatentTrajectory = Trajectory<Latent>;
pub type AttentionTrajectory = Trajectory<AttentionSnapshot>;

impl<P: Payload> Trajectory<P> {
    /// A trajectory that never spills.
    pub fn in_memory(meta: TrajectoryMeta) -> Self {
        let budget = Arc::new(Budget { limit: usize::MAX, used: AtomicUsize::new(0) });
        Self::with_budget(meta, budget, None, Precision::F64)
    }

    fn with_budget(
        meta: TrajectoryMeta,
        budget: Arc<Budget>,
        spill_dir: Option<PathBuf>,
        precision: Precision,
    ) -> Self {
        Self {
            meta,
            signature: None,
            entries: BTreeMap::new(),
            precision,
            budget,
            resident_bytes: 0,
            owns_spill_dir: spill_dir.is_some(),
            spill_dir,
        }
    }

    pub fn meta(&self) -> &TrajectoryMeta {
        &self.meta
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn timesteps(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.keys().copied()
    }

    pub fn contains(&self, t: usize) -> bool {
        self.entries.contains_key(&t)
    }

    /// Number of entries currently on disk rather than in memory.
    pub fn spilled_count(&self) -> usize {
        self.entries.values().filter(|s| matches!(s, Slot::Spilled(_))).count()
    }

    pub fn record(&mut self, t: usize, payload: P) -> Result<(), TrajectoryError> {
        if self.entries.contains_key(&t) {
            return Err(TrajectoryError::Duplicate(t));
        }
        let signature = payload.signature();
        match &self.signature {
            Some(expected) if *expected != signature => {
                return Err(TrajectoryError::ShapeMismatch(format!("t={t}: expected {expected}, got {signature}")));
            }
            Some(_) => {}
            None => self.signature = Some(signature),
        }
        let payload = payload.quantize(self.precision);
        let bytes = payload.byte_len();
        let slot = match &self.spill_dir {
            Some(dir) if !self.budget.try_reserve(bytes) => {
                let path = dir.join(step_file_name(t));
                write_step(&path, t, &payload, self.precision)?;
                Slot::Spilled(path)
            }
            Some(_) => {
                self.resident_bytes += bytes;
                Slot::Resident(Arc::new(payload))
            }
            None => Slot::Resident(Arc::new(payload)),
        };
        self.entries.insert(t, slot);
        Ok(())
    }

    pub fn lookup(&self, t: usize) -> Result<Arc<P>, TrajectoryError> {
        match self.entries.get(&t) {
            Some(Slot::Resident(p)) => Ok(Arc::clone(p)),
            Some(Slot::Spilled(path)) => {
                let (header, payload) = read_step::<P>(path)?;
                if header.t != t {
                    return Err(TrajectoryError::Corrupt(format!("{} holds t={}", path.display(), header.t)));
                }
                Ok(Arc::new(payload))
            }
            None => Err(TrajectoryError::Missing(t)),
        }
    }

    /// Writes every step plus a `meta.json` index into `dir`.
    pub fn persist(&self, dir: &Path) -> Result<(), TrajectoryError> {
        fs::create_dir_all(dir)?;
        for &t in self.entries.keys() {
            let payload = self.lookup(t)?;
            write_step(&dir.join(step_file_name(t)), t, payload.as_ref(), self.precision)?;
        }
        let index = TrajectoryIndex {
            kind: P::KIND.to_string(),
            meta: self.meta.clone(),
            precision: self.precision,
            timesteps: self.entries.keys().copied().collect(),
        };
        let json = serde_json::to_vec_pretty(&index).map_err(|e| TrajectoryError::Corrupt(e.to_string()))?;
        fs::write(dir.join("meta.json"), json)?;
        Ok(())
    }

    /// Opens a persisted trajectory; steps are read lazily from disk.
    pub fn open(dir: &Path) -> Result<Self, TrajectoryError> {
        let raw = fs::read(dir.join("meta.json"))?;
        let index: TrajectoryIndex =
            serde_json::from_slice(&raw).map_err(|e| TrajectoryError::Corrupt(e.to_string()))?;
        if index.kind != P::KIND {
            return Err(TrajectoryError::Corrupt(format!("expected {} trajectory, found {}", P::KIND, index.kind)));
        }
        let mut traj = Self::in_memory(index.meta);
        traj.precision = index.precision;
        for t in index.timesteps {
            let path = dir.join(step_file_name(t));
            if !path.exists() {
                return Err(TrajectoryError::Missing(t));
            }
            traj.entries.insert(t, Slot::Spilled(path));
        }
        if let Some(&first) = traj.entries.keys().next() {
            traj.signature = Some(traj.lookup(first)?.signature());
        }
        Ok(traj)
    }
}

impl<P: Payload> Drop for Trajectory<P> {
    fn drop(&mut self) {
        self.budget.release(self.resident_bytes);
        if self.owns_spill_dir {
            if let Some(dir) = &self.spill_dir {
                let _ = fs::remove_dir_all(dir);
            }
        }
    }
}

impl<P: Payload> std::fmt::Debug for Trajectory<P> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Trajectory")
            .field("kind", &P::KIND)
            .field("meta", &self.meta)
            .field("len", &self.entries.len())
            .field("spilled", &self.spilled_count())
            .finish()
    }
}

#[derive(Serialize, Deserialize)]
struct TrajectoryIndex {
    kind: String,
    meta: TrajectoryMeta,
    precision: Precision,
    timesteps: Vec<usize>,
}

fn step_file_name(t: usize) -> String {
    format!("t{t:05}.bin")
}

/// Storage policy for trajectories.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StoreConfig {
    /// Resident-bytes budget shared by all trajectories of the store.
    /// `None` means unbounded.
    pub memory_budget: Option<usize>,
    /// Where over-budget entries are spilled. Without it nothing spills.
    pub spill_dir: Option<PathBuf>,
    /// Persistent inversion cache.
    pub cache_dir: Option<PathBuf>,
    /// Storage precision for attention maps.
    pub attention_precision: Precision,
}

/// Latent and attention trajectories of one completed inversion.
#[derive(Debug)]
pub struct InvertedTrajectories {
    pub key: String,
    pub latents: LatentTrajectory,
    pub attention: AttentionTrajectory,
}

const MEMO_CAPACITY: usize = 16;

/// Inversions by key, plus keys in insertion order for eviction.
type Memo = (HashMap<String, Arc<InvertedTrajectories>>, VecDeque<String>);

/// Creates trajectories under a shared budget and memoizes inversions.
pub struct TrajectoryStore {
    config: StoreConfig,
    budget: Arc<Budget>,
    next_id: AtomicU64,
    memo: Mutex<Memo>,
}

impl Default for TrajectoryStore {
    fn default() -> Self {
        Self::new(StoreConfig::default())
    }
}

impl TrajectoryStore {
    pub fn new(config: StoreConfig) -> Self {
        let budget = Arc::new(Budget { limit: config.memory_budget.unwrap_or(usize::MAX), used: AtomicUsize::new(0) });
        Self { config, budget, next_id: AtomicU64::new(0), memo: Mutex::new((HashMap::new(), VecDeque::new())) }
    }

    pub fn config(&self) -> &StoreConfig {
        &self.config
    }

    pub fn resident_bytes(&self) -> usize {
        self.budget.used.load(Ordering::Acquire)
    }

    fn spill_dir_for(&self, kind: &str) -> Option<PathBuf> {
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        self.config.spill_dir.as_ref().map(|d| d.join(format!("{kind}-{}-{id}", std::process::id())))
    }

    pub fn latent_trajectory(&self, meta: TrajectoryMeta) -> LatentTrajectory {
        let dir = self.spill_dir_for(Latent::KIND);
        Trajectory::with_budget(meta, Arc::clone(&self.budget), dir, Precision::F64)
    }

    pub fn attention_trajectory(&self, meta: TrajectoryMeta) -> AttentionTrajectory {
        let dir = self.spill_dir_for(AttentionSnapshot::KIND);
        Trajectory::with_budget(meta, Arc::clone(&self.budget), dir, self.config.attention_precision)
    }

    /// Looks up a memoized or persisted inversion.
    pub fn cached(&self, key: &str) -> Option<Arc<InvertedTrajectories>> {
        if let Some(hit) = self.memo.lock().expect("memo lock").0.get(key) {
            return Some(Arc::clone(hit));
        }
        let dir = self.config.cache_dir.as_ref()?.join(key);
        if !dir.join("latents").join("meta.json").exists() {
            return None;
        }
        let loaded = (|| -> Result<_, TrajectoryError> {
            Ok(InvertedTrajectories {
                key: key.to_string(),
                latents: Trajectory::open(&dir.join("latents"))?,
                attention: Trajectory::open(&dir.join("attention"))?,
            })
        })();
        match loaded {
            Ok(inv) => Some(self.memoize(inv)),
            Err(e) => {
                log::warn!("ignoring unreadable cache entry {key}: {e}");
                None
            }
        }
    }

    /// Memoizes `inv` and persists it when a cache directory is configured.
    /// Persistence failures are logged, not returned.
    pub fn insert(&self, inv: InvertedTrajectories) -> Arc<InvertedTrajectories> {
        if let Some(root) = &self.config.cache_dir {
            let dir = root.join(&inv.key);
            let res =
                inv.latents.persist(&dir.join("latents")).and_then(|_| inv.attention.persist(&dir.join("attention")));
            if let Err(e) = res {
                log::warn!("failed to persist inversion {}: {e}", inv.key);
            }
        }
        self.memoize(inv)
    }

    fn memoize(&self, inv: InvertedTrajectories) -> Arc<InvertedTrajectories> {
        let mut guard = self.memo.lock().expect("memo lock");
        let (map, order) = &mut *guard;
        let key = inv.key.clone();
        let inv = Arc::new(inv);
        if map.insert(key.clone(), Arc::clone(&inv)).is_none() {
            order.push_back(key);
        }
        while order.len() > MEMO_CAPACITY {
            if let Some(old) = order.pop_front() {
                map.remove(&old);
            }
        }
        inv
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn meta() -> TrajectoryMeta {
        TrajectoryMeta { direction: Direction::Inversion, prompt_fingerprint: "p".into(), seed: 0, steps: 3 }
    }

    fn latent(v: f64) -> Latent {
        Array3::from_shape_fn((2, 3, 3), |(c, y, x)| v + c as f64 * 0.5 - y as f64 * 0.25 + x as f64 / 3.0)
    }

    #[test]
    fn record_then_lookup() {
        let mut tr = LatentTrajectory::in_memory(meta());
        for t in 0..=3 {
            tr.record(t, latent(t as f64)).unwrap();
        }
        assert_eq!(tr.len(), 4);
        assert_eq!(*tr.lookup(3).unwrap(), latent(3.0));
        assert!(matches!(tr.lookup(9), Err(TrajectoryError::Missing(9))));
    }

    #[test]
    fn duplicate_and_shape_errors() {
        let mut tr = LatentTrajectory::in_memory(meta());
        tr.record(0, latent(0.0)).unwrap();
        assert!(matches!(tr.record(0, latent(1.0)), Err(TrajectoryError::Duplicate(0))));
        assert!(matches!(tr.record(1, Array3::zeros((1, 3, 3))), Err(TrajectoryError::ShapeMismatch(_))));
    }

    #[test]
    fn over_budget_entries_spill_and_read_back() {
        let dir = tempfile::tempdir().unwrap();
        let store = TrajectoryStore::new(StoreConfig {
            memory_budget: Some(2 * 18 * 8),
            spill_dir: Some(dir.path().to_path_buf()),
            ..StoreConfig::default()
        });
        let mut tr = store.latent_trajectory(meta());
        let values: Vec<Latent> = (0..5).map(|t| latent(t as f64 * std::f64::consts::PI)).collect();
        for (t, v) in values.iter().enumerate() {
            tr.record(t, v.clone()).unwrap();
        }
        assert_eq!(tr.spilled_count(), 3);
        for (t, v) in values.iter().enumerate() {
            assert!(crate::tensor::bit_identical(&tr.lookup(t).unwrap(), v));
        }
        assert_eq!(store.resident_bytes(), 2 * 18 * 8);
        drop(tr);
        assert_eq!(store.resident_bytes(), 0);
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0, "spill files removed on drop");
    }

    #[test]
    fn corrupt_file_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.bin");
        fs::write(&path, b"nope").unwrap();
        assert!(matches!(read_step::<Latent>(&path), Err(TrajectoryError::Corrupt(_))));
    }
}
