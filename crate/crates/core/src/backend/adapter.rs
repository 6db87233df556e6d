//! Low-rank style adapters and merge-with-replace weight bookkeeping.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::BackendError;
use crate::tensor::ContentHasher;

/// Reference to an adapter plus the strength it is merged with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleAdapterRef {
    /// Filesystem path, or a registry id resolved by [`AdapterRegistry`].
    pub path: String,
    #[serde(default = "default_scale")]
    pub scale: f64,
}

fn default_scale() -> f64 {
    1.0
}

/// `W += scale * (alpha / rank) * up . down` for one target weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowRankDelta {
    pub target: String,
    /// `out x rank`
    pub up: Array2<f64>,
    /// `rank x in`
    pub down: Array2<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
}

impl LowRankDelta {
    pub fn rank(&self) -> usize {
        self.down.nrows()
    }

    pub fn dense(&self, scale: f64) -> Result<Array2<f64>, BackendError> {
        if self.up.ncols() != self.down.nrows() || self.rank() == 0 {
            return Err(BackendError::AdapterShape {
                target: self.target.clone(),
                detail: format!("up is {:?}, down is {:?}", self.up.dim(), self.down.dim()),
            });
        }
        let alpha = self.alpha.unwrap_or(self.rank() as f64);
        Ok(self.up.dot(&self.down) * (scale * alpha / self.rank() as f64))
    }
}

/// A loaded adapter with its merge scale applied at load time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleAdapter {
    pub name: String,
    #[serde(default = "default_scale")]
    pub scale: f64,
    pub deltas: Vec<LowRankDelta>,
}

impl StyleAdapter {
    /// Reads the JSON adapter format `{name, deltas: [{target, up, down, alpha?}]}`.
    pub fn from_file(path: &Path, scale: f64) -> Result<Self, BackendError> {
        let raw = std::fs::read(path).map_err(|e| BackendError::AdapterIo(format!("{}: {e}", path.display())))?;
        let mut adapter: StyleAdapter =
            serde_json::from_slice(&raw).map_err(|e| BackendError::AdapterIo(format!("{}: {e}", path.display())))?;
        if !(0.0..=1.0).contains(&scale) {
            return Err(BackendError::AdapterIo(format!("merge scale {scale} outside [0, 1]")));
        }
        adapter.scale = scale;
        Ok(adapter)
    }

    pub fn fingerprint(&self) -> String {
        let mut h = ContentHasher::new();
        h.str(&self.name).f64(self.scale);
        for d in &self.deltas {
            h.str(&d.target).f64(d.alpha.unwrap_or(f64::NAN));
            for v in d.up.iter().chain(d.down.iter()) {
                h.f64(*v);
            }
        }
        h.finish_hex()[..16].to_string()
    }
}

/// Resolves adapter references: existing paths are used as-is, anything
/// else is looked up as `<dir>/<id>.json`.
#[derive(Debug, Clone, Default)]
pub struct AdapterRegistry {
    pub dir: Option<PathBuf>,
}

impl AdapterRegistry {
    pub fn resolve(&self, r: &StyleAdapterRef) -> Result<StyleAdapter, BackendError> {
        let direct = PathBuf::from(&r.path);
        let path = if direct.exists() {
            direct
        } else if let Some(dir) = &self.dir {
            dir.join(format!("{}.json", r.path))
        } else {
            return Err(BackendError::AdapterIo(format!("adapter `{}` not found", r.path)));
        };
        StyleAdapter::from_file(&path, r.scale)
    }
}

/// Base weights plus the currently merged adapter.
#[derive(Debug, Clone)]
pub struct WeightSet {
    base: BTreeMap<String, Array2<f64>>,
    merged: BTreeMap<String, Array2<f64>>,
    active: Option<String>,
}

impl WeightSet {
    pub fn new(base: BTreeMap<String, Array2<f64>>) -> Self {
        Self { merged: base.clone(), base, active: None }
    }

    pub fn get(&self, name: &str) -> &Array2<f64> {
        self.merged.get(name).unwrap_or_else(|| panic!("weight `{name}` not registered"))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.base.keys().map(String::as_str)
    }

    pub fn active_adapter(&self) -> Option<&str> {
        self.active.as_deref()
    }

    /// Replace semantics: the result is `base + deltas`, whatever was merged before.
    pub fn merge(&mut self, adapter: &StyleAdapter, adaptable: impl Fn(&str) -> bool) -> Result<(), BackendError> {
        let mut merged = self.base.clone();
        for delta in &adapter.deltas {
            if !adaptable(&delta.target) {
                return Err(BackendError::MissingWeight(delta.target.clone()));
            }
            let w = merged.get_mut(&delta.target).ok_or_else(|| BackendError::MissingWeight(delta.target.clone()))?;
            let dense = delta.dense(adapter.scale)?;
            if dense.dim() != w.dim() {
                return Err(BackendError::AdapterShape {
                    target: delta.target.clone(),
                    detail: format!("delta is {:?}, weight is {:?}", dense.dim(), w.dim()),
                });
            }
            *w += &dense;
        }
        self.merged = merged;
        self.active = Some(format!("{}@{}", adapter.name, adapter.fingerprint()));
        Ok(())
    }

    pub fn reset(&mut self) {
        self.merged = self.base.clone();
        self.active = None;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn weights() -> WeightSet {
        let mut base = BTreeMap::new();
        base.insert("w".to_string(), Array2::zeros((2, 3)));
        WeightSet::new(base)
    }

    fn adapter(scale: f64) -> StyleAdapter {
        StyleAdapter {
            name: "a".into(),
            scale,
            deltas: vec![LowRankDelta {
                target: "w".into(),
                up: array![[1.0], [2.0]],
                down: array![[1.0, 0.0, -1.0]],
                alpha: None,
            }],
        }
    }

    #[test]
    fn merge_is_replace_not_accumulate() {
        let mut w = weights();
        w.merge(&adapter(0.5), |_| true).unwrap();
        w.merge(&adapter(0.5), |_| true).unwrap();
        assert_eq!(w.get("w"), &array![[0.5, 0.0, -0.5], [1.0, 0.0, -1.0]]);
        w.reset();
        assert_eq!(w.get("w"), &Array2::<f64>::zeros((2, 3)));
    }

    #[test]
    fn rejects_unknown_or_misshapen_targets() {
        let mut w = weights();
        let mut a = adapter(1.0);
        a.deltas[0].target = "nope".into();
        assert!(matches!(w.merge(&a, |_| true), Err(BackendError::MissingWeight(_))));
        let mut a = adapter(1.0);
        a.deltas[0].down = array![[1.0, 0.0]];
        assert!(matches!(w.merge(&a, |_| true), Err(BackendError::AdapterShape { .. })));
        assert!(matches!(w.merge(&adapter(1.0), |_| false), Err(BackendError::MissingWeight(_))));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("style.json");
        std::fs::write(&path, serde_json::to_vec(&adapter(1.0)).unwrap()).unwrap();
        let reg = AdapterRegistry { dir: Some(dir.path().to_path_buf()) };
        let loaded = reg.resolve(&StyleAdapterRef { path: "style".into(), scale: 0.25 }).unwrap();
        assert_eq!(loaded.scale, 0.25);
        assert_eq!(loaded.deltas, adapter(1.0).deltas);
        assert!(reg.resolve(&StyleAdapterRef { path: "missing".into(), scale: 1.0 }).is_err());
    }
}
