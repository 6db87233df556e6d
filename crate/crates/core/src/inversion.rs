//! Deterministic DDIM inversion with attention recording.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{AttentionControl, BackendError, DiffusionBackend};
use crate::tensor::{shape3, ContentHasher, Latent};
use crate::trajectory::{
    Direction, InvertedTrajectories, SiteFilter, TrajectoryError, TrajectoryMeta, TrajectoryStore,
};

#[derive(Debug, Error)]
pub enum InversionError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
    #[error("latent shape {got:?} does not match the backend ({expected:?})")]
    ShapeMismatch { expected: [usize; 3], got: [usize; 3] },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InversionConfig {
    pub steps: usize,
    pub guidance: f64,
    pub seed: u64,
    pub site_filter: SiteFilter,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self { steps: 50, guidance: 1.0, seed: 0, site_filter: SiteFilter::default() }
    }
}

#[derive(Debug, Clone)]
pub struct Inversion {
    pub trajectories: Arc<InvertedTrajectories>,
    pub cache_hit: bool,
}

/// Cache key over everything the inversion result depends on.
pub fn inversion_key(backend_id: &str, z0: &Latent, prompt: &str, config: &InversionConfig) -> String {
    let filter = serde_json::to_string(&config.site_filter).unwrap_or_default();
    let mut h = ContentHasher::new();
    h.str("inversion/v1")
        .str(backend_id)
        .array(z0)
        .str(prompt)
        .u64(config.seed)
        .u64(config.steps as u64)
        .f64(config.guidance)
        .str(&filter);
    h.finish_hex()[..32].to_string()
}

/// Inverts `z0` under `prompt`, recording `z*_0..z*_T` and `A*_1..A*_T`.
///
/// `A*_t` is recorded by the prediction made at `z*_{t-1}` that produces
/// `z*_t`. Results are memoized in `store` by [`inversion_key`].
pub fn invert<B: DiffusionBackend + ?Sized>(
    z0: &Latent,
    prompt: &str,
    backend: &B,
    config: &InversionConfig,
    store: &TrajectoryStore,
) -> Result<Inversion, InversionError> {
    let [c, h, w] = shape3(z0);
    let f = backend.downscale();
    let expected = backend.latent_shape(h * f, w * f)?;
    if expected != [c, h, w] {
        return Err(InversionError::ShapeMismatch { expected, got: [c, h, w] });
    }
    let key = inversion_key(&backend.id(), z0, prompt, config);
    if let Some(hit) = store.cached(&key) {
        log::debug!("inversion cache hit {key}");
        return Ok(Inversion { trajectories: hit, cache_hit: true });
    }

    let steps = config.steps;
    let schedule = backend.noise_schedule(steps)?;
    let cond = backend.embed(prompt)?;
    let meta = TrajectoryMeta {
        direction: Direction::Inversion,
        prompt_fingerprint: ContentHasher::new().str(prompt).finish_hex()[..16].to_string(),
        seed: config.seed,
        steps,
    };
    let mut latents = store.latent_trajectory(meta.clone());
    let mut attention = store.attention_trajectory(meta);
    latents.record(0, z0.clone())?;
    let mut z = z0.clone();
    for t in 1..=steps {
        let pred =
            backend.predict(&z, t, steps, &cond, config.guidance, AttentionControl::record(&config.site_filter))?;
        z = schedule.ddim_invert_step(&z, &pred.eps, t)?;
        latents.record(t, z.clone())?;
        attention.record(t, pred.snapshot.expect("recording was requested"))?;
    }
    let trajectories = store.insert(InvertedTrajectories { key, latents, attention });
    Ok(Inversion { trajectories, cache_hit: false })
}
