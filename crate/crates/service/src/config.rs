use std::path::{Path, PathBuf};

use lams_core::backend::{BackendConfig, BackendKind};
use lams_core::masking::{MaskOptions, StubRule};
use lams_core::trajectory::{SiteFilter, StoreConfig};
use serde::{Deserialize, Serialize};

use crate::ServiceError;

/// Where mask prompts are sent.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SegmentationConfig {
    /// Mask prompts fail with a retryable error.
    #[default]
    None,
    /// Fixed rectangles per keyword.
    Stub {
        #[serde(default)]
        rules: Vec<StubRule>,
    },
    /// A segmentation sidecar speaking the JSON protocol of [`crate::HttpSegmenter`].
    Http {
        url: String,
        #[serde(default = "default_timeout_ms")]
        timeout_ms: u64,
    },
}

fn default_timeout_ms() -> u64 {
    30_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub host: String,
    pub port: u16,
    /// Run records and artifacts live here.
    pub data_dir: PathBuf,
    /// Backend instances, one worker thread each.
    pub workers: usize,
    pub backend: BackendConfig,
    pub segmentation: SegmentationConfig,
    /// Trajectory storage; a relative `cache_dir` or `spill_dir` resolves
    /// against `data_dir`.
    pub store: StoreConfig,
    pub site_filter: SiteFilter,
    pub mask: MaskOptions,
    /// Directory for adapter ids given without a path.
    pub adapter_dir: Option<PathBuf>,
    /// Base directory for relative image paths in requests.
    pub input_dir: Option<PathBuf>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            host: "127.0.0.1".into(),
            port: 8080,
            data_dir: PathBuf::from("lams-data"),
            workers: 1,
            backend: BackendConfig::default(),
            segmentation: SegmentationConfig::default(),
            store: StoreConfig::default(),
            site_filter: SiteFilter::default(),
            mask: MaskOptions::default(),
            adapter_dir: None,
            input_dir: None,
        }
    }
}

impl ServiceConfig {
    /// Reads `.json` or TOML (any other extension).
    pub fn from_file(path: &Path) -> Result<Self, ServiceError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| ServiceError::Config(format!("{}: {e}", path.display())))?;
        let parsed = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => serde_json::from_str(&text).map_err(|e| e.to_string()),
            _ => toml::from_str(&text).map_err(|e| e.to_string()),
        };
        parsed.map_err(|e| ServiceError::Config(format!("{}: {e}", path.display())))
    }

    /// Applies `LAMS_*` overrides from the process environment.
    pub fn with_env(self) -> Result<Self, ServiceError> {
        self.with_overrides(|k| std::env::var(k).ok())
    }

    /// Applies overrides looked up by variable name:
    /// `LAMS_HOST`, `LAMS_PORT`, `LAMS_DATA_DIR`, `LAMS_WORKERS`,
    /// `LAMS_BACKEND` (`toy-a`, `toy-b`, `real`), `LAMS_CHECKPOINT` and
    /// `LAMS_SEGMENTATION_URL`.
    pub fn with_overrides(mut self, var: impl Fn(&str) -> Option<String>) -> Result<Self, ServiceError> {
        let bad = |name: &str, value: &str| ServiceError::Config(format!("{name}={value} is invalid"));
        if let Some(v) = var("LAMS_HOST") {
            self.host = v;
        }
        if let Some(v) = var("LAMS_PORT") {
            self.port = v.parse().map_err(|_| bad("LAMS_PORT", &v))?;
        }
        if let Some(v) = var("LAMS_DATA_DIR") {
            self.data_dir = PathBuf::from(v);
        }
        if let Some(v) = var("LAMS_WORKERS") {
            self.workers = v.parse().map_err(|_| bad("LAMS_WORKERS", &v))?;
        }
        if let Some(v) = var("LAMS_BACKEND") {
            self.backend.backend = match v.as_str() {
                "toy-a" => BackendKind::ToyA,
                "toy-b" => BackendKind::ToyB,
                "real" => BackendKind::Real,
                _ => return Err(bad("LAMS_BACKEND", &v)),
            };
        }
        if let Some(v) = var("LAMS_CHECKPOINT") {
            self.backend.checkpoint = Some(v);
        }
        if let Some(url) = var("LAMS_SEGMENTATION_URL") {
            self.segmentation = SegmentationConfig::Http { url, timeout_ms: default_timeout_ms() };
        }
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), ServiceError> {
        if self.workers == 0 {
            return Err(ServiceError::Config("workers must be at least 1".into()));
        }
        Ok(())
    }

    pub(crate) fn resolved_store(&self) -> StoreConfig {
        let mut store = self.store.clone();
        for dir in [&mut store.cache_dir, &mut store.spill_dir] {
            if let Some(d) = dir.as_mut() {
                if d.is_relative() {
                    *d = self.data_dir.join(&*d);
                }
            }
        }
        store
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    #[test]
    fn toml_with_env_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("svc.toml");
        std::fs::write(
            &path,
            "port = 9000\nworkers = 2\n[backend]\nbackend = \"toy-a\"\nsteps = 20\n[segmentation]\nkind = \"stub\"\n",
        )
        .unwrap();
        let cfg = ServiceConfig::from_file(&path).unwrap();
        assert_eq!((cfg.port, cfg.workers, cfg.backend.steps), (9000, 2, 20));
        assert_eq!(cfg.segmentation, SegmentationConfig::Stub { rules: vec![] });

        let env: HashMap<&str, &str> =
            [("LAMS_PORT", "9100"), ("LAMS_BACKEND", "toy-b"), ("LAMS_DATA_DIR", "/tmp/x")].into_iter().collect();
        let cfg = cfg.with_overrides(|k| env.get(k).map(|v| v.to_string())).unwrap();
        assert_eq!(cfg.port, 9100);
        assert_eq!(cfg.backend.backend, BackendKind::ToyB);
        assert_eq!(cfg.data_dir, PathBuf::from("/tmp/x"));

        let err = ServiceConfig::default().with_overrides(|k| (k == "LAMS_WORKERS").then(|| "many".to_string()));
        assert!(err.is_err());
    }

    #[test]
    fn relative_cache_dir_resolves_under_data_dir() {
        let cfg = ServiceConfig {
            data_dir: PathBuf::from("/data"),
            store: StoreConfig { cache_dir: Some("cache".into()), ..StoreConfig::default() },
            ..ServiceConfig::default()
        };
        assert_eq!(cfg.resolved_store().cache_dir, Some(PathBuf::from("/data/cache")));
    }
}
