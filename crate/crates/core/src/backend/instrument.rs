//! Call-counting decorator used to verify per-iteration model usage.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use super::{
    guided_predict, AttentionControl, AttentionHook, BackendError, BetaSchedule, DiffusionBackend, NoiseSchedule,
    Prediction, PromptEmbedding, StyleAdapter,
};
use crate::tensor::{Image, Latent};
use crate::trajectory::SiteInfo;

#[derive(Debug, Default)]
pub struct CallCounts {
    predict: AtomicUsize,
    branch: AtomicUsize,
    encode: AtomicUsize,
    decode: AtomicUsize,
}

impl CallCounts {
    /// Guided predictions (one per `predict` call).
    pub fn predict(&self) -> usize {
        self.predict.load(Ordering::Relaxed)
    }

    /// Single-branch denoiser passes (two per guided prediction when guidance != 1).
    pub fn branch(&self) -> usize {
        self.branch.load(Ordering::Relaxed)
    }

    pub fn encode(&self) -> usize {
        self.encode.load(Ordering::Relaxed)
    }

    pub fn decode(&self) -> usize {
        self.decode.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        for c in [&self.predict, &self.branch, &self.encode, &self.decode] {
            c.store(0, Ordering::Relaxed);
        }
    }
}

/// Wraps a backend and counts its calls.
pub struct CountingBackend<B> {
    inner: B,
    counts: Arc<CallCounts>,
}

impl<B: DiffusionBackend> CountingBackend<B> {
    pub fn new(inner: B) -> Self {
        Self { inner, counts: Arc::new(CallCounts::default()) }
    }

    pub fn counts(&self) -> Arc<CallCounts> {
        Arc::clone(&self.counts)
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }

    pub fn into_inner(self) -> B {
        self.inner
    }
}

impl<B: DiffusionBackend> DiffusionBackend for CountingBackend<B> {
    fn id(&self) -> String {
        self.inner.id()
    }

    fn beta_schedule(&self) -> BetaSchedule {
        self.inner.beta_schedule()
    }

    fn downscale(&self) -> usize {
        self.inner.downscale()
    }

    fn image_channels(&self) -> usize {
        self.inner.image_channels()
    }

    fn latent_channels(&self) -> usize {
        self.inner.latent_channels()
    }

    fn site_registry(&self, latent_shape: [usize; 3]) -> Vec<SiteInfo> {
        self.inner.site_registry(latent_shape)
    }

    fn encode(&self, image: &Image) -> Result<Latent, BackendError> {
        self.counts.encode.fetch_add(1, Ordering::Relaxed);
        self.inner.encode(image)
    }

    fn decode(&self, latent: &Latent) -> Result<Image, BackendError> {
        self.counts.decode.fetch_add(1, Ordering::Relaxed);
        self.inner.decode(latent)
    }

    fn embed(&self, prompt: &str) -> Result<PromptEmbedding, BackendError> {
        self.inner.embed(prompt)
    }

    fn predict_branch(
        &self,
        z: &Latent,
        t: usize,
        steps: usize,
        cond: &PromptEmbedding,
        hook: &mut dyn AttentionHook,
    ) -> Result<Latent, BackendError> {
        self.counts.branch.fetch_add(1, Ordering::Relaxed);
        self.inner.predict_branch(z, t, steps, cond, hook)
    }

    fn load_style_adapter(&mut self, adapter: &StyleAdapter) -> Result<(), BackendError> {
        self.inner.load_style_adapter(adapter)
    }

    fn unload_style_adapter(&mut self) {
        self.inner.unload_style_adapter()
    }

    fn noise_schedule(&self, steps: usize) -> Result<NoiseSchedule, BackendError> {
        self.inner.noise_schedule(steps)
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
        self.counts.predict.fetch_add(1, Ordering::Relaxed);
        guided_predict(self, z, t, steps, cond, guidance, control)
    }
}
