//! The model-facing contract.
//!
//! [`DiffusionBackend`] covers the codec, prompt embedding, noise prediction
//! with attention recording/injection, the noise schedule and style-adapter
//! merging. Classifier-free guidance is implemented once, in
//! [`DiffusionBackend::predict`], on top of the single-branch
//! [`DiffusionBackend::predict_branch`] each implementation provides.

mod adapter;
mod config;
mod embedding;
mod instrument;
mod latent_diffusion;
mod noise;
mod toy;

use ndarray::Array3;
use thiserror::Error;

pub use adapter::{AdapterRegistry, LowRankDelta, StyleAdapter, StyleAdapterRef, WeightSet};
pub use config::{build_backend, BackendConfig, BackendKind};
pub use embedding::{PromptEmbedding, TokenKind, WordTokenizer};
pub use instrument::{CallCounts, CountingBackend};
pub use latent_diffusion::{LatentDiffusionBackend, LatentDiffusionConfig, ModelRuntime};
pub use noise::{ddim_transfer, BetaSchedule, NoiseSchedule};
pub use toy::{ToyAffineBackend, ToyConfig, ToyMode, ToySite};

use crate::tensor::{Image, Latent};
use crate::trajectory::{AttentionSnapshot, SiteFilter, SiteInfo};

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("image must have {expected} channels, got {got}")]
    ChannelCount { expected: usize, got: usize },
    #[error("image dimensions {height}x{width} are not divisible by {factor}")]
    BadDimensions { height: usize, width: usize, factor: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("prompt needs {tokens} tokens but the tokenizer allows {max}")]
    PromptTooLong { tokens: usize, max: usize },
    #[error("timestep {t} outside [1, {steps}]")]
    TimestepOutOfRange { t: usize, steps: usize },
    #[error("invalid noise schedule: {0}")]
    InvalidSchedule(String),
    #[error("unknown attention site `{0}`")]
    UnknownSite(String),
    #[error("adapter targets unknown weight `{0}`")]
    MissingWeight(String),
    #[error("adapter rank/shape mismatch on `{target}`: {detail}")]
    AdapterShape { target: String, detail: String },
    #[error("failed to read adapter: {0}")]
    AdapterIo(String),
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    #[error("invalid backend config: {0}")]
    Config(String),
    #[error("model runtime failed: {0}")]
    Runtime(String),
}

/// Attention recording and injection requested for one prediction.
#[derive(Debug, Clone, Copy, Default)]
pub struct AttentionControl<'a> {
    /// Record the conditional branch's maps at sites accepted by the filter.
    pub record: Option<&'a SiteFilter>,
    /// Maps that replace the computed ones at their sites.
    pub inject: Option<&'a AttentionSnapshot>,
}

impl<'a> AttentionControl<'a> {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn record(filter: &'a SiteFilter) -> Self {
        Self { record: Some(filter), inject: None }
    }

    pub fn inject(snapshot: &'a AttentionSnapshot) -> Self {
        Self { record: None, inject: Some(snapshot) }
    }
}

#[derive(Debug, Clone)]
pub struct Prediction {
    pub eps: Latent,
    /// Recorded maps of the conditional branch, when recording was requested.
    pub snapshot: Option<AttentionSnapshot>,
}

/// Per-site callback a denoiser invokes right after computing each
/// attention probability map and before aggregating values with it.
pub trait AttentionHook {
    /// Whether the denoiser has to materialize maps for `site` at all.
    fn wants_site(&self, _site: &SiteInfo) -> bool {
        true
    }

    fn on_attention(&mut self, site: &SiteInfo, probs: &mut Array3<f64>) -> Result<(), BackendError>;
}

/// Hook that records filtered sites and overrides injected ones.
pub struct RecordInjectHook<'a> {
    control: AttentionControl<'a>,
    recorded_sites: Vec<SiteInfo>,
    recorded_maps: Vec<Array3<f64>>,
    injected: usize,
}

impl<'a> RecordInjectHook<'a> {
    pub fn new(control: AttentionControl<'a>, registry: &[SiteInfo]) -> Result<Self, BackendError> {
        if let Some(inj) = control.inject {
            for (site, map) in inj.iter() {
                let known = registry
                    .iter()
                    .find(|s| s.name == site.name)
                    .ok_or_else(|| BackendError::UnknownSite(site.name.clone()))?;
                if known.map_shape() != map.dim() {
                    return Err(BackendError::ShapeMismatch(format!(
                        "injected map for {} is {:?}, site expects {:?}",
                        site.name,
                        map.dim(),
                        known.map_shape()
                    )));
                }
            }
        }
        Ok(Self { control, recorded_sites: Vec::new(), recorded_maps: Vec::new(), injected: 0 })
    }

    pub fn injected_count(&self) -> usize {
        self.injected
    }

    pub fn into_snapshot(self) -> Result<Option<AttentionSnapshot>, BackendError> {
        if self.control.record.is_none() {
            return Ok(None);
        }
        AttentionSnapshot::new(self.recorded_sites, self.recorded_maps)
            .map(Some)
            .map_err(|e| BackendError::ShapeMismatch(e.to_string()))
    }
}

impl AttentionHook for RecordInjectHook<'_> {
    fn wants_site(&self, site: &SiteInfo) -> bool {
        self.control.record.is_some_and(|f| f.accepts(site))
            || self.control.inject.is_some_and(|s| s.map(&site.name).is_some())
    }

    fn on_attention(&mut self, site: &SiteInfo, probs: &mut Array3<f64>) -> Result<(), BackendError> {
        if self.control.record.is_some_and(|f| f.accepts(site)) {
            self.recorded_sites.push(site.clone());
            self.recorded_maps.push(probs.clone());
        }
        if let Some(map) = self.control.inject.and_then(|s| s.map(&site.name)) {
            probs.assign(map);
            self.injected += 1;
        }
        Ok(())
    }
}

/// A latent diffusion model as seen by the editing pipeline.
///
/// `predict` must be deterministic in its inputs. One instance serves one
/// job at a time; adapter loading requires exclusive access.
pub trait DiffusionBackend: Send {
    /// Identifies the model and its currently merged adapter; part of cache keys.
    fn id(&self) -> String;

    fn beta_schedule(&self) -> BetaSchedule;

    /// Spatial downscale factor between image and latent.
    fn downscale(&self) -> usize;

    fn image_channels(&self) -> usize;

    fn latent_channels(&self) -> usize;

    /// Attention sites present for latents of the given shape.
    fn site_registry(&self, latent_shape: [usize; 3]) -> Vec<SiteInfo>;

    fn encode(&self, image: &Image) -> Result<Latent, BackendError>;

    fn decode(&self, latent: &Latent) -> Result<Image, BackendError>;

    /// Embeds `prompt`; the empty string yields the unconditional embedding.
    fn embed(&self, prompt: &str) -> Result<PromptEmbedding, BackendError>;

    /// One unguided noise prediction at timestep `t` of a `steps`-step run.
    fn predict_branch(
        &self,
        z: &Latent,
        t: usize,
        steps: usize,
        cond: &PromptEmbedding,
        hook: &mut dyn AttentionHook,
    ) -> Result<Latent, BackendError>;

    /// Merges `adapter` into the denoiser weights, replacing any adapter
    /// merged before. Codec, schedule and site registry are unaffected.
    fn load_style_adapter(&mut self, adapter: &StyleAdapter) -> Result<(), BackendError>;

    fn unload_style_adapter(&mut self);

    fn noise_schedule(&self, steps: usize) -> Result<NoiseSchedule, BackendError> {
        NoiseSchedule::scaled_linear(&self.beta_schedule(), steps)
    }

    fn latent_shape(&self, image_height: usize, image_width: usize) -> Result<[usize; 3], BackendError> {
        let f = self.downscale();
        if image_height == 0 || image_width == 0 || !image_height.is_multiple_of(f) || !image_width.is_multiple_of(f) {
            return Err(BackendError::BadDimensions { height: image_height, width: image_width, factor: f });
        }
        Ok([self.latent_channels(), image_height / f, image_width / f])
    }

    /// Classifier-free-guided prediction; see [`guided_predict`].
    fn predict(
        &self,
        z: &Latent,
        t: usize,
        steps: usize,
        cond: &PromptEmbedding,
        guidance: f64,
        control: AttentionControl<'_>,
    ) -> Result<Prediction, BackendError> {
        guided_predict(self, z, t, steps, cond, guidance, control)
    }
}

/// Classifier-free guidance over [`DiffusionBackend::predict_branch`].
///
/// With `guidance == 1` only the conditional branch runs. Otherwise the
/// unconditional branch runs without recording or injection and
/// `eps = eps_uncond + guidance * (eps_cond - eps_uncond)`. Recording and
/// injection always apply to the conditional branch.
pub fn guided_predict<B: DiffusionBackend + ?Sized>(
    backend: &B,
    z: &Latent,
    t: usize,
    steps: usize,
    cond: &PromptEmbedding,
    guidance: f64,
    control: AttentionControl<'_>,
) -> Result<Prediction, BackendError> {
    if t == 0 || t > steps {
        return Err(BackendError::TimestepOutOfRange { t, steps });
    }
    let registry = backend.site_registry(crate::tensor::shape3(z));
    let mut hook = RecordInjectHook::new(control, &registry)?;
    let eps_cond = backend.predict_branch(z, t, steps, cond, &mut hook)?;
    let snapshot = hook.into_snapshot()?;
    if guidance == 1.0 {
        return Ok(Prediction { eps: eps_cond, snapshot });
    }
    let uncond = backend.embed("")?;
    let mut passive = RecordInjectHook::new(AttentionControl::none(), &registry)?;
    let eps_uncond = backend.predict_branch(z, t, steps, &uncond, &mut passive)?;
    let mut eps = eps_uncond;
    ndarray::Zip::from(&mut eps).and(&eps_cond).for_each(|u, &c| *u += guidance * (c - *u));
    Ok(Prediction { eps, snapshot })
}

impl<B: DiffusionBackend + ?Sized> DiffusionBackend for Box<B> {
    fn id(&self) -> String {
        (**self).id()
    }

    fn beta_schedule(&self) -> BetaSchedule {
        (**self).beta_schedule()
    }

    fn downscale(&self) -> usize {
        (**self).downscale()
    }

    fn image_channels(&self) -> usize {
        (**self).image_channels()
    }

    fn latent_channels(&self) -> usize {
        (**self).latent_channels()
    }

    fn site_registry(&self, latent_shape: [usize; 3]) -> Vec<SiteInfo> {
        (**self).site_registry(latent_shape)
    }

    fn encode(&self, image: &Image) -> Result<Latent, BackendError> {
        (**self).encode(image)
    }

    fn decode(&self, latent: &Latent) -> Result<Image, BackendError> {
        (**self).decode(latent)
    }

    fn embed(&self, prompt: &str) -> Result<PromptEmbedding, BackendError> {
        (**self).embed(prompt)
    }

    fn predict_branch(
        &self,
        z: &Latent,
        t: usize,
        steps: usize,
        cond: &PromptEmbedding,
        hook: &mut dyn AttentionHook,
    ) -> Result<Latent, BackendError> {
        (**self).predict_branch(z, t, steps, cond, hook)
    }

    fn load_style_adapter(&mut self, adapter: &StyleAdapter) -> Result<(), BackendError> {
        (**self).load_style_adapter(adapter)
    }

    fn unload_style_adapter(&mut self) {
        (**self).unload_style_adapter()
    }

    fn noise_schedule(&self, steps: usize) -> Result<NoiseSchedule, BackendError> {
        (**self).noise_schedule(steps)
    }

    fn latent_shape(&self, image_height: usize, image_width: usize) -> Result<[usize; 3], BackendError> {
        (**self).latent_shape(image_height, image_width)
    }

    fn predict(
        &self,
        z: &Latent,
        t: usize,
        steps: usize,
        cond: &PromptEmbedding,
        guidance: f64,
        control: AttentionControl<'_>,
    ) -> Result<Prediction, BackendError> {
        (**self).predict(z, t, steps, cond, guidance, control)
    }
}
