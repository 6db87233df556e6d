//! The editing loop.
//!
//! After inversion both branches start from `z*_{T-k}` (`k` is the start
//! iteration). Each iteration `i = T - t` runs, in this order:
//!
//! 1. reconstruction branch: predict with the source prompt, recording `Ã_t`,
//!    then a DDIM step;
//! 2. edit branch, first pass: predict with the target prompt, recording `Â_t`;
//! 3. `Â^mixed_t = w^A_i A*_t + (1 - w^A_i) Â_t`;
//! 4. edit branch, second pass: predict injecting the prompt-to-prompt maps
//!    built from `Ã_t` and `Â^mixed_t`, then a DDIM step;
//! 5. latent mixing with `z*_{t-1}` under `w^z_i`;
//! 6. mask blend with `z*_{t-1}` when a mask is present.
//!
//! A style adapter, if any, is merged after inversion and removed when the
//! loop ends.

use std::fmt;
use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{
    AdapterRegistry, AttentionControl, DiffusionBackend, NoiseSchedule, PromptEmbedding, StyleAdapterRef,
};
use crate::imageio::ImageInput;
use crate::inversion::{invert, InversionConfig};
use crate::lams::{blend_mask, mix_attention, mix_latent};
use crate::masking::{decode_mask_image, MaskOptions, MaskSource, RoiMask, SegmentationClient};
use crate::p2p::{P2PConfig, P2PPlan};
use crate::schedule::{make_schedule, SchedulerSpec, WeightSchedule};
use crate::tensor::{shape3, ContentHasher, Image, Latent};
use crate::trajectory::{SiteFilter, TrajectoryStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub steps: usize,
    pub guidance: f64,
    pub inversion_guidance: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { steps: 50, guidance: 7.5, inversion_guidance: 1.0, seed: 0 }
    }
}

fn default_attention_schedule() -> SchedulerSpec {
    SchedulerSpec::default_attention()
}

fn default_latent_schedule() -> SchedulerSpec {
    SchedulerSpec::default_latent()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditRequest {
    pub image: ImageInput,
    pub source_prompt: String,
    pub target_prompt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_prompt: Option<String>,
    /// Image-resolution mask; takes precedence over `mask_prompt`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<ImageInput>,
    #[serde(default = "default_attention_schedule")]
    pub attention_schedule: SchedulerSpec,
    #[serde(default = "default_latent_schedule")]
    pub latent_schedule: SchedulerSpec,
    #[serde(default)]
    pub p2p: P2PConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adapter: Option<StyleAdapterRef>,
    #[serde(default)]
    pub sampler: SamplerConfig,
    /// Number of leading denoising iterations to skip.
    #[serde(default)]
    pub start_iteration: usize,
}

impl EditRequest {
    pub fn new(image: ImageInput, source_prompt: impl Into<String>, target_prompt: impl Into<String>) -> Self {
        Self {
            image,
            source_prompt: source_prompt.into(),
            target_prompt: target_prompt.into(),
            mask_prompt: None,
            mask: None,
            attention_schedule: SchedulerSpec::default_attention(),
            latent_schedule: SchedulerSpec::default_latent(),
            p2p: P2PConfig::default(),
            adapter: None,
            sampler: SamplerConfig::default(),
            start_iteration: 0,
        }
    }

    /// Every field-level problem, empty when the request is valid.
    pub fn validate(&self) -> Vec<FieldError> {
        let mut errs = Vec::new();
        let mut push = |field: &str, message: String| errs.push(FieldError { field: field.into(), message });
        for (field, text) in [("source_prompt", &self.source_prompt), ("target_prompt", &self.target_prompt)] {
            if crate::backend::WordTokenizer::words(text).is_empty() {
                push(field, "must contain at least one word".into());
            }
        }
        if let Some(p) = &self.mask_prompt {
            if p.trim().is_empty() {
                push("mask_prompt", "must be non-empty when present".into());
            }
        }
        let steps = self.sampler.steps;
        if steps == 0 {
            push("sampler.steps", "must be at least 1".into());
        }
        for (field, g) in [
            ("sampler.guidance", self.sampler.guidance),
            ("sampler.inversion_guidance", self.sampler.inversion_guidance),
        ] {
            if !g.is_finite() || g < 0.0 {
                push(field, format!("{g} must be finite and non-negative"));
            }
        }
        for (field, spec) in
            [("attention_schedule", &self.attention_schedule), ("latent_schedule", &self.latent_schedule)]
        {
            if let Err(e) = spec.validate() {
                push(field, e.to_string());
            } else if steps > 0 {
                if let Err(e) = make_schedule(spec, steps) {
                    push(field, e.to_string());
                }
            }
        }
        if let Err(e) = self.p2p.validate() {
            push("p2p", e.to_string());
        }
        if steps > 0 && self.start_iteration >= steps {
            push("start_iteration", format!("{} must be below steps ({steps})", self.start_iteration));
        }
        if let Some(a) = &self.adapter {
            if !(0.0..=1.0).contains(&a.scale) {
                push("adapter.scale", format!("{} outside [0, 1]", a.scale));
            }
            if a.path.trim().is_empty() {
                push("adapter.path", "must be non-empty".into());
            }
        }
        errs
    }

    pub fn inversion_config(&self, site_filter: &SiteFilter) -> InversionConfig {
        InversionConfig {
            steps: self.sampler.steps,
            guidance: self.sampler.inversion_guidance,
            seed: self.sampler.seed,
            site_filter: site_filter.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl fmt::Display for FieldError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Load,
    Encode,
    Mask,
    Invert,
    Adapter,
    Denoise,
    Decode,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default();
        f.write_str(&s)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error("invalid request: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<FieldError>),
    #[error("{stage} stage failed: {message}")]
    Stage { stage: Stage, message: String, retryable: bool },
}

impl PipelineError {
    fn at(stage: Stage) -> impl FnOnce(&dyn fmt::Display) -> PipelineError {
        move |e| PipelineError::Stage { stage, message: e.to_string(), retryable: false }
    }

    pub fn stage(&self) -> Option<Stage> {
        match self {
            PipelineError::Stage { stage, .. } => Some(*stage),
            PipelineError::Invalid(_) => None,
        }
    }

    pub fn is_retryable(&self) -> bool {
        matches!(self, PipelineError::Stage { retryable: true, .. })
    }
}

fn fail<E: fmt::Display>(stage: Stage) -> impl FnOnce(E) -> PipelineError {
    move |e| PipelineError::at(stage)(&e)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "lowercase")]
pub enum Progress {
    Stage {
        stage: Stage,
    },
    /// `iteration` denoising iterations of `total` are complete.
    Iteration {
        iteration: usize,
        total: usize,
    },
}

/// Shared resources for edits.
pub struct EditContext<'a> {
    pub store: &'a TrajectoryStore,
    pub adapters: AdapterRegistry,
    pub segmenter: Option<&'a dyn SegmentationClient>,
    pub site_filter: SiteFilter,
    pub mask_options: MaskOptions,
    /// Relative image paths resolve against this directory.
    pub base_dir: Option<PathBuf>,
}

impl<'a> EditContext<'a> {
    pub fn new(store: &'a TrajectoryStore) -> Self {
        Self {
            store,
            adapters: AdapterRegistry::default(),
            segmenter: None,
            site_filter: SiteFilter::default(),
            mask_options: MaskOptions::default(),
            base_dir: None,
        }
    }
}

/// Decoded request inputs.
#[derive(Debug, Clone)]
pub struct EditInputs {
    pub image: Image,
    pub mask: Option<RoiMask>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedSchedules {
    pub attention: WeightSchedule,
    pub latent: WeightSchedule,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub inversion_ms: f64,
    pub per_iteration_ms: Vec<f64>,
    pub total_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSummary {
    pub source: MaskSource,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
    /// Fraction of latent cells inside the mask.
    pub latent_coverage: f64,
}

/// JSON-friendly description of a finished edit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditSummary {
    pub backend_id: String,
    pub request_hash: String,
    pub output_hash: String,
    pub inversion_key: String,
    pub inversion_cache_hit: bool,
    /// `[channels, height, width]` of the edited image.
    pub image_shape: [usize; 3],
    pub schedules: ResolvedSchedules,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask: Option<MaskSummary>,
    pub timings: Timings,
}

#[derive(Debug, Clone)]
pub struct EditResult {
    pub edited: Image,
    pub reconstruction: Image,
    /// Final edit-branch latent `ẑ_0`.
    pub latent: Latent,
    /// Final reconstruction-branch latent `z̃_0`.
    pub reconstruction_latent: Latent,
    pub mask: Option<RoiMask>,
    pub summary: EditSummary,
}

/// Hash of everything that determines the output.
pub fn request_hash(req: &EditRequest, image: &Image, mask: Option<&RoiMask>, backend_id: &str) -> String {
    let mut canonical = req.clone();
    canonical.image = ImageInput::Base64(String::new());
    canonical.mask = None;
    let json = serde_json::to_string(&canonical).unwrap_or_default();
    let mut h = ContentHasher::new();
    h.str("edit/v1").str(backend_id).str(&json).array(image);
    if let Some(m) = mask {
        h.bytes(m.latent.as_slice().unwrap_or(&m.latent.iter().copied().collect::<Vec<_>>()));
    }
    h.finish_hex()[..32].to_string()
}

pub fn output_hash(edited: &Image, reconstruction: &Image) -> String {
    ContentHasher::new().array(edited).array(reconstruction).finish_hex()[..32].to_string()
}

/// Loads the image and resolves the mask.
pub fn resolve_inputs<B: DiffusionBackend + ?Sized>(
    req: &EditRequest,
    backend: &B,
    ctx: &EditContext<'_>,
) -> Result<EditInputs, PipelineError> {
    let base = ctx.base_dir.as_deref();
    let image = req.image.load(base).map_err(fail(Stage::Load))?;
    let (_, h, w) = image.dim();
    let latent = backend.latent_shape(h, w).map_err(fail(Stage::Load))?;
    let dims = [latent[1], latent[2]];
    let mask = if let Some(m) = &req.mask {
        let bytes = m.bytes(base).map_err(fail(Stage::Mask))?;
        let bin = decode_mask_image(&bytes).map_err(fail(Stage::Mask))?;
        if bin.dim() != (h, w) {
            return Err(PipelineError::Stage {
                stage: Stage::Mask,
                message: format!("mask is {:?}, image is {h}x{w}", bin.dim()),
                retryable: false,
            });
        }
        Some(RoiMask::from_user(bin, dims, ctx.mask_options).map_err(fail(Stage::Mask))?)
    } else if let Some(prompt) = &req.mask_prompt {
        let client = ctx.segmenter.ok_or_else(|| PipelineError::Stage {
            stage: Stage::Mask,
            message: "a mask prompt was given but no segmentation client is configured".into(),
            retryable: true,
        })?;
        let roi = RoiMask::from_prompt(&image, prompt, client, dims, ctx.mask_options).map_err(|e| {
            PipelineError::Stage { stage: Stage::Mask, message: e.to_string(), retryable: e.is_retryable() }
        })?;
        if let Some(w) = &roi.warning {
            log::warn!("{w}");
        }
        Some(roi)
    } else {
        None
    };
    Ok(EditInputs { image, mask })
}

/// Runs the full edit described by `req`.
pub fn edit<B: DiffusionBackend + ?Sized>(
    req: &EditRequest,
    backend: &mut B,
    ctx: &EditContext<'_>,
    progress: &mut dyn FnMut(Progress),
) -> Result<EditResult, PipelineError> {
    let errs = req.validate();
    if !errs.is_empty() {
        return Err(PipelineError::Invalid(errs));
    }
    progress(Progress::Stage { stage: Stage::Load });
    let inputs = resolve_inputs(req, backend, ctx)?;
    edit_with_inputs(req, &inputs, backend, ctx, progress)
}

fn ms_since(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

/// [`edit`] with already decoded inputs; `req.image` and `req.mask` are ignored.
pub fn edit_with_inputs<B: DiffusionBackend + ?Sized>(
    req: &EditRequest,
    inputs: &EditInputs,
    backend: &mut B,
    ctx: &EditContext<'_>,
    progress: &mut dyn FnMut(Progress),
) -> Result<EditResult, PipelineError> {
    let errs = req.validate();
    if !errs.is_empty() {
        return Err(PipelineError::Invalid(errs));
    }
    let started = Instant::now();
    let steps = req.sampler.steps;
    let base_id = backend.id();

    progress(Progress::Stage { stage: Stage::Encode });
    let z0 = backend.encode(&inputs.image).map_err(fail(Stage::Encode))?;
    if let Some(m) = &inputs.mask {
        let [_, h, w] = shape3(&z0);
        if m.latent.dim() != (h, w) {
            return Err(PipelineError::Stage {
                stage: Stage::Mask,
                message: format!("latent mask is {:?}, latent is {h}x{w}", m.latent.dim()),
                retryable: false,
            });
        }
    }
    let schedules = ResolvedSchedules {
        attention: make_schedule(&req.attention_schedule, steps).map_err(fail(Stage::Denoise))?,
        latent: make_schedule(&req.latent_schedule, steps).map_err(fail(Stage::Denoise))?,
    };

    progress(Progress::Stage { stage: Stage::Invert });
    let inv_started = Instant::now();
    let inversion = invert(&z0, &req.source_prompt, &*backend, &req.inversion_config(&ctx.site_filter), ctx.store)
        .map_err(fail(Stage::Invert))?;
    let inversion_ms = ms_since(inv_started);

    let adapter = match &req.adapter {
        Some(r) => {
            progress(Progress::Stage { stage: Stage::Adapter });
            let adapter = ctx.adapters.resolve(r).map_err(fail(Stage::Adapter))?;
            backend.load_style_adapter(&adapter).map_err(fail(Stage::Adapter))?;
            true
        }
        None => false,
    };
    progress(Progress::Stage { stage: Stage::Denoise });
    let looped = denoise(req, &schedules, &inversion.trajectories, inputs.mask.as_ref(), &*backend, progress);
    if adapter {
        backend.unload_style_adapter();
    }
    let (latent, reconstruction_latent, per_iteration_ms) = looped?;

    progress(Progress::Stage { stage: Stage::Decode });
    let edited = backend.decode(&latent).map_err(fail(Stage::Decode))?;
    let reconstruction = backend.decode(&reconstruction_latent).map_err(fail(Stage::Decode))?;

    let summary = EditSummary {
        request_hash: request_hash(req, &inputs.image, inputs.mask.as_ref(), &base_id),
        output_hash: output_hash(&edited, &reconstruction),
        backend_id: base_id,
        inversion_key: inversion.trajectories.key.clone(),
        inversion_cache_hit: inversion.cache_hit,
        image_shape: shape3(&edited),
        schedules,
        mask: inputs.mask.as_ref().map(|m| MaskSummary {
            source: m.source,
            prompt: m.prompt.clone(),
            warning: m.warning.clone(),
            latent_coverage: m.latent.iter().map(|&v| f64::from(v)).sum::<f64>() / m.latent.len() as f64,
        }),
        timings: Timings { inversion_ms, per_iteration_ms, total_ms: ms_since(started) },
    };
    Ok(EditResult { edited, reconstruction, latent, reconstruction_latent, mask: inputs.mask.clone(), summary })
}

type LoopOutput = (Latent, Latent, Vec<f64>);

fn denoise<B: DiffusionBackend + ?Sized>(
    req: &EditRequest,
    schedules: &ResolvedSchedules,
    inv: &crate::trajectory::InvertedTrajectories,
    mask: Option<&RoiMask>,
    backend: &B,
    progress: &mut dyn FnMut(Progress),
) -> Result<LoopOutput, PipelineError> {
    let steps = req.sampler.steps;
    let guidance = req.sampler.guidance;
    let stage = |e: &dyn fmt::Display| PipelineError::at(Stage::Denoise)(e);

    let schedule: NoiseSchedule = backend.noise_schedule(steps).map_err(|e| stage(&e))?;
    let source: PromptEmbedding = backend.embed(&req.source_prompt).map_err(|e| stage(&e))?;
    let target: PromptEmbedding = backend.embed(&req.target_prompt).map_err(|e| stage(&e))?;
    let plan = P2PPlan::new(req.p2p.clone(), &source, &target).map_err(|e| stage(&e))?;
    let filter = inv_filter(inv);

    let t_start = steps - req.start_iteration;
    let start = inv.latents.lookup(t_start).map_err(|e| stage(&e))?;
    let mut z_rec = (*start).clone();
    let mut z_edit = (*start).clone();
    let mut timings = Vec::with_capacity(t_start);
    for t in (1..=t_start).rev() {
        let iter_started = Instant::now();
        let i = steps - t;
        let record = AttentionControl::record(&filter);

        let rec = backend.predict(&z_rec, t, steps, &source, guidance, record).map_err(|e| stage(&e))?;
        let a_rec = rec.snapshot.expect("recording was requested");
        z_rec = schedule.ddim_step(&z_rec, &rec.eps, t).map_err(|e| stage(&e))?;

        let first = backend.predict(&z_edit, t, steps, &target, guidance, record).map_err(|e| stage(&e))?;
        let a_edit = first.snapshot.expect("recording was requested");

        let a_inv = inv.attention.lookup(t).map_err(|e| stage(&e))?;
        let w_a = schedules.attention.weights[i];
        let a_mixed = mix_attention(&a_inv, &a_edit, w_a).map_err(|e| stage(&e))?;

        let injected = plan.apply(&a_rec, &a_mixed, i, steps).map_err(|e| stage(&e))?;
        let second = backend
            .predict(&z_edit, t, steps, &target, guidance, AttentionControl::inject(&injected))
            .map_err(|e| stage(&e))?;
        let z_next = schedule.ddim_step(&z_edit, &second.eps, t).map_err(|e| stage(&e))?;

        let z_inv = inv.latents.lookup(t - 1).map_err(|e| stage(&e))?;
        let mut mixed = mix_latent(&z_inv, &z_next, schedules.latent.weights[i]).map_err(|e| stage(&e))?;
        if let Some(m) = mask {
            mixed = blend_mask(&mixed, &z_inv, &m.latent).map_err(|e| stage(&e))?;
        }
        z_edit = mixed;
        timings.push(ms_since(iter_started));
        progress(Progress::Iteration { iteration: i + 1, total: steps });
    }
    Ok((z_edit, z_rec, timings))
}

/// Sites recorded during inversion, so both sides share a registry.
fn inv_filter(inv: &crate::trajectory::InvertedTrajectories) -> SiteFilter {
    let names = inv
        .attention
        .timesteps()
        .next()
        .and_then(|t| inv.attention.lookup(t).ok())
        .map(|s| s.sites().iter().map(|x| x.name.clone()).collect::<Vec<_>>())
        .unwrap_or_default();
    SiteFilter { max_query_tokens: usize::MAX, allow: Some(names) }
}

#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub image: Image,
    pub latent: Latent,
    pub inversion_key: String,
    pub inversion_cache_hit: bool,
}

/// Inverts `image` under `prompt` and regenerates it with plain DDIM
/// sampling (no mixing, no injection) from `z*_T`.
pub fn reconstruct<B: DiffusionBackend + ?Sized>(
    image: &Image,
    prompt: &str,
    sampler: &SamplerConfig,
    backend: &B,
    ctx: &EditContext<'_>,
) -> Result<Reconstruction, PipelineError> {
    if crate::backend::WordTokenizer::words(prompt).is_empty() {
        return Err(PipelineError::Invalid(vec![FieldError {
            field: "source_prompt".into(),
            message: "must contain at least one word".into(),
        }]));
    }
    let steps = sampler.steps;
    let z0 = backend.encode(image).map_err(fail(Stage::Encode))?;
    let cfg = InversionConfig {
        steps,
        guidance: sampler.inversion_guidance,
        seed: sampler.seed,
        site_filter: ctx.site_filter.clone(),
    };
    let inv = invert(&z0, prompt, backend, &cfg, ctx.store).map_err(fail(Stage::Invert))?;
    let schedule = backend.noise_schedule(steps).map_err(fail(Stage::Denoise))?;
    let cond = backend.embed(prompt).map_err(fail(Stage::Denoise))?;
    let mut z = (*inv.trajectories.latents.lookup(steps).map_err(fail(Stage::Denoise))?).clone();
    for t in (1..=steps).rev() {
        let pred = backend
            .predict(&z, t, steps, &cond, sampler.guidance, AttentionControl::none())
            .map_err(fail(Stage::Denoise))?;
        z = schedule.ddim_step(&z, &pred.eps, t).map_err(fail(Stage::Denoise))?;
    }
    let out = backend.decode(&z).map_err(fail(Stage::Decode))?;
    Ok(Reconstruction {
        image: out,
        latent: z,
        inversion_key: inv.trajectories.key.clone(),
        inversion_cache_hit: inv.cache_hit,
    })
}
