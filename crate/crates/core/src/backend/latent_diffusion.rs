//! Adapter from a pretrained latent-diffusion stack (VAE, text encoder,
//! UNet) to [`DiffusionBackend`].
//!
//! The numerical components live behind [`ModelRuntime`]; this type owns the
//! parts that are independent of the model implementation: image range
//! conversion, latent scaling, geometry checks, timestep mapping and adapter
//! bookkeeping.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{AttentionHook, BackendError, BetaSchedule, DiffusionBackend, PromptEmbedding, StyleAdapter, TokenKind};
use crate::tensor::{shape3, Image, Latent};
use crate::trajectory::SiteInfo;

/// Output of a text encoder, with each token tagged by the word it belongs to.
#[derive(Debug, Clone)]
pub struct TextEncoding {
    pub words: Vec<String>,
    pub token_kinds: Vec<TokenKind>,
    pub hidden: Array2<f64>,
}

/// The pretrained networks. Implementations must invoke the hook once per
/// attention site per UNet call, after softmax and before value aggregation.
pub trait ModelRuntime: Send {
    fn name(&self) -> String;

    /// VAE encoder mean for an image in `[-1, 1]`, before latent scaling.
    fn vae_encode(&self, image: &Image) -> Result<Latent, BackendError>;

    /// VAE decoder output in `[-1, 1]` for an unscaled latent.
    fn vae_decode(&self, latent: &Latent) -> Result<Image, BackendError>;

    fn encode_text(&self, prompt: &str) -> Result<TextEncoding, BackendError>;

    fn attention_sites(&self, latent_shape: [usize; 3]) -> Vec<SiteInfo>;

    fn unet(
        &self,
        z: &Latent,
        train_timestep: usize,
        context: &Array2<f64>,
        hook: &mut dyn AttentionHook,
    ) -> Result<Latent, BackendError>;

    /// Merges (or with `None`, removes) a low-rank adapter with replace semantics.
    fn apply_adapter(&mut self, adapter: Option<&StyleAdapter>) -> Result<(), BackendError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LatentDiffusionConfig {
    pub checkpoint: String,
    pub latent_scale: f64,
    pub downscale: usize,
    pub latent_channels: usize,
    pub beta: BetaSchedule,
}

impl Default for LatentDiffusionConfig {
    /// Stable Diffusion 1.x geometry.
    fn default() -> Self {
        Self {
            checkpoint: String::new(),
            latent_scale: 0.18215,
            downscale: 8,
            latent_channels: 4,
            beta: BetaSchedule::default(),
        }
    }
}

pub struct LatentDiffusionBackend<R> {
    config: LatentDiffusionConfig,
    runtime: R,
    adapter: Option<String>,
}

impl<R: ModelRuntime> LatentDiffusionBackend<R> {
    pub fn new(config: LatentDiffusionConfig, runtime: R) -> Self {
        Self { config, runtime, adapter: None }
    }

    pub fn runtime(&self) -> &R {
        &self.runtime
    }

    fn train_timestep(&self, t: usize, steps: usize) -> usize {
        let ratio = self.config.beta.train_steps / steps;
        ((t - 1) * ratio + self.config.beta.steps_offset).min(self.config.beta.train_steps - 1)
    }
}

impl<R: ModelRuntime> DiffusionBackend for LatentDiffusionBackend<R> {
    fn id(&self) -> String {
        format!("ldm:{}:{}:{}", self.runtime.name(), self.config.checkpoint, self.adapter.as_deref().unwrap_or("base"))
    }

    fn beta_schedule(&self) -> BetaSchedule {
        self.config.beta
    }

    fn downscale(&self) -> usize {
        self.config.downscale
    }

    fn image_channels(&self) -> usize {
        3
    }

    fn latent_channels(&self) -> usize {
        self.config.latent_channels
    }

    fn site_registry(&self, latent_shape: [usize; 3]) -> Vec<SiteInfo> {
        self.runtime.attention_sites(latent_shape)
    }

    fn encode(&self, image: &Image) -> Result<Latent, BackendError> {
        let [c, h, w] = shape3(image);
        if c != 3 {
            return Err(BackendError::ChannelCount { expected: 3, got: c });
        }
        let expected = self.latent_shape(h, w)?;
        let latent = self.runtime.vae_encode(&image.mapv(|v| 2.0 * v - 1.0))? * self.config.latent_scale;
        if shape3(&latent) != expected {
            return Err(BackendError::ShapeMismatch(format!("VAE produced {:?}, expected {expected:?}", latent.dim())));
        }
        Ok(latent)
    }

    fn decode(&self, latent: &Latent) -> Result<Image, BackendError> {
        if latent.dim().0 != self.config.latent_channels {
            return Err(BackendError::ShapeMismatch(format!(
                "latent has {} channels, expected {}",
                latent.dim().0,
                self.config.latent_channels
            )));
        }
        let image = self.runtime.vae_decode(&(latent / self.config.latent_scale))?;
        Ok(image.mapv(|v| (v + 1.0) / 2.0))
    }

    fn embed(&self, prompt: &str) -> Result<PromptEmbedding, BackendError> {
        let enc = self.runtime.encode_text(prompt)?;
        Ok(PromptEmbedding {
            text: prompt.to_string(),
            is_unconditional: enc.words.is_empty(),
            words: enc.words,
            token_kinds: enc.token_kinds,
            vectors: enc.hidden,
        })
    }

    fn predict_branch(
        &self,
        z: &Latent,
        t: usize,
        steps: usize,
        cond: &PromptEmbedding,
        hook: &mut dyn AttentionHook,
    ) -> Result<Latent, BackendError> {
        if t == 0 || t > steps {
            return Err(BackendError::TimestepOutOfRange { t, steps });
        }
        let eps = self.runtime.unet(z, self.train_timestep(t, steps), &cond.vectors, hook)?;
        if eps.dim() != z.dim() {
            return Err(BackendError::ShapeMismatch(format!("UNet produced {:?} for {:?}", eps.dim(), z.dim())));
        }
        Ok(eps)
    }

    fn load_style_adapter(&mut self, adapter: &StyleAdapter) -> Result<(), BackendError> {
        self.runtime.apply_adapter(Some(adapter))?;
        self.adapter = Some(format!("{}@{}", adapter.name, adapter.fingerprint()));
        Ok(())
    }

    fn unload_style_adapter(&mut self) {
        if self.runtime.apply_adapter(None).is_ok() {
            self.adapter = None;
        }
    }
}
