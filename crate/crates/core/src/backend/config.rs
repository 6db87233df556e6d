use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BackendError, DiffusionBackend, ToyAffineBackend, ToyConfig, ToyMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BackendKind {
    #[serde(rename = "toy-a")]
    ToyA,
    #[serde(rename = "toy-b")]
    ToyB,
    #[serde(rename = "real")]
    Real,
}

/// Backend selection and sampler defaults, read from TOML or JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub backend: BackendKind,
    pub checkpoint: Option<String>,
    pub steps: usize,
    pub guidance: f64,
    pub inversion_guidance: f64,
    pub seed: u64,
    /// Toy image/latent channel count.
    pub channels: usize,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            backend: BackendKind::ToyB,
            checkpoint: None,
            steps: 50,
            guidance: 7.5,
            inversion_guidance: 1.0,
            seed: 0,
            channels: 3,
        }
    }
}

impl BackendConfig {
    /// Loads `.toml` or `.json` by extension.
    pub fn from_file(path: &Path) -> Result<Self, BackendError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| BackendError::Config(format!("{}: {e}", path.display())))?;
        let parsed = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => serde_json::from_str(&text).map_err(|e| e.to_string()),
            _ => toml::from_str(&text).map_err(|e| e.to_string()),
        };
        parsed.map_err(|e| BackendError::Config(format!("{}: {e}", path.display())))
    }

    pub fn toy_config(&self) -> Option<ToyConfig> {
        let mode = match self.backend {
            BackendKind::ToyA => ToyMode::A,
            BackendKind::ToyB => ToyMode::B,
            BackendKind::Real => return None,
        };
        Some(ToyConfig { mode, seed: self.seed, channels: self.channels, ..ToyConfig::default() })
    }
}

/// Instantiates the configured backend.
///
/// The `real` backend needs a [`super::ModelRuntime`] implementation, which
/// this crate does not ship; construct [`super::LatentDiffusionBackend`]
/// directly with one.
pub fn build_backend(config: &BackendConfig) -> Result<Box<dyn DiffusionBackend>, BackendError> {
    match config.toy_config() {
        Some(toy) => Ok(Box::new(ToyAffineBackend::new(toy)?)),
        None => Err(BackendError::Unavailable(format!(
            "no model runtime is linked for checkpoint {:?}",
            config.checkpoint.as_deref().unwrap_or("<unset>")
        ))),
    }
}
