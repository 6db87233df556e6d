//! Deterministic affine stand-in for a latent diffusion model.
//!
//! * codec: identity (latent = image, downscale 1)
//! * embedding: a seeded vector per word, wrapped in BOS/EOS and padded
//! * mode A: `eps(z, t, tau) = b(tau)`, independent of `z`, so DDIM
//!   inversion is exact
//! * mode B: `eps(z, t, tau) = M z + b(tau)` with `||M|| <= coupling`
//! * attention: per site, softmax of a seeded bilinear form between pooled
//!   latent features and either the other cells (self) or the prompt tokens
//!   (cross). Injected maps perturb `eps` by `gain * (L(A_injected) -
//!   L(A_computed))`, where `L` aggregates seeded value vectors with the map.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex};

use ndarray::{s, Array1, Array2, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    AttentionHook, BackendError, BetaSchedule, DiffusionBackend, PromptEmbedding, StyleAdapter, TokenKind, WeightSet,
    WordTokenizer,
};
use crate::tensor::{derive_seed, shape3, Image, Latent};
use crate::trajectory::{softmax_rows, SiteInfo, SiteKind};

const POS_DIMS: usize = 4;
const SHARPNESS: f64 = 2.0;
const FIELD_GAIN: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ToyMode {
    A,
    B,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToySite {
    pub name: String,
    pub kind: SiteKind,
    /// Query grid is the latent downsampled by this factor (ceil).
    pub factor: usize,
    pub heads: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyConfig {
    pub mode: ToyMode,
    pub seed: u64,
    pub channels: usize,
    pub embed_dim: usize,
    pub max_tokens: usize,
    /// Spectral-norm bound of `M` in mode B.
    pub coupling: f64,
    pub injection_gain: f64,
    pub sites: Vec<ToySite>,
    pub beta: BetaSchedule,
}

impl Default for ToyConfig {
    fn default() -> Self {
        let site = |name: &str, kind, factor, heads| ToySite { name: name.into(), kind, factor, heads };
        Self {
            mode: ToyMode::A,
            seed: 0,
            channels: 3,
            embed_dim: 8,
            max_tokens: 16,
            coupling: 0.1,
            injection_gain: 1.0,
            sites: vec![
                site("down.cross.f1", SiteKind::Cross, 1, 1),
                site("down.self.f4", SiteKind::SelfAttention, 4, 2),
                site("mid.cross.f4", SiteKind::Cross, 4, 2),
                site("up.cross.f8", SiteKind::Cross, 8, 1),
            ],
            beta: BetaSchedule::default(),
        }
    }
}

impl ToyConfig {
    pub fn mode_a(seed: u64) -> Self {
        Self { mode: ToyMode::A, seed, ..Self::default() }
    }

    pub fn mode_b(seed: u64) -> Self {
        Self { mode: ToyMode::B, seed, ..Self::default() }
    }

    pub fn with_channels(mut self, channels: usize) -> Self {
        self.channels = channels;
        self
    }
}

pub struct ToyAffineBackend {
    config: ToyConfig,
    weights: WeightSet,
    fields: Mutex<HashMap<[usize; 3], Arc<Array4<f64>>>>,
}

fn uniform_matrix(seed: u64, label: &str, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, label));
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0) * scale)
}

fn frobenius(m: &Array2<f64>) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

impl ToyAffineBackend {
    pub fn new(config: ToyConfig) -> Result<Self, BackendError> {
        if config.channels == 0 || config.embed_dim == 0 || config.max_tokens < 2 {
            return Err(BackendError::Config("toy backend needs channels, embed_dim >= 1 and max_tokens >= 2".into()));
        }
        if config.sites.iter().any(|s| s.factor == 0 || s.heads == 0) {
            return Err(BackendError::Config("toy sites need factor and heads >= 1".into()));
        }
        let (c, d, seed) = (config.channels, config.embed_dim, config.seed);
        let mut base = BTreeMap::new();
        base.insert("text_proj".to_string(), uniform_matrix(seed, "text_proj", c, d, 1.0 / (d as f64).sqrt()));
        base.insert("bias".to_string(), uniform_matrix(seed, "bias", c, 1, 0.1));
        for label in ["mix.channel", "mix.shift"] {
            let m = uniform_matrix(seed, label, c, c, 1.0);
            // Frobenius >= spectral norm, so this bounds each factor by `coupling`.
            let m = &m * (config.coupling / frobenius(&m));
            base.insert(label.to_string(), m);
        }
        for site in &config.sites {
            let key_dim = match site.kind {
                SiteKind::SelfAttention => c + POS_DIMS,
                SiteKind::Cross => d,
            };
            let w = uniform_matrix(seed, &format!("attn.{}.qk", site.name), site.heads * (c + POS_DIMS), key_dim, 1.0);
            base.insert(format!("attn.{}.qk", site.name), w);
        }
        Ok(Self { config, weights: WeightSet::new(base), fields: Mutex::new(HashMap::new()) })
    }

    pub fn config(&self) -> &ToyConfig {
        &self.config
    }

    pub fn active_adapter(&self) -> Option<&str> {
        self.weights.active_adapter()
    }

    fn is_adaptable(name: &str) -> bool {
        name == "text_proj" || name == "bias" || name.starts_with("attn.")
    }

    fn token_vector(&self, token: &str) -> Array1<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, &format!("tok:{token}")));
        Array1::from_shape_simple_fn(self.config.embed_dim, || rng.random_range(-1.0..1.0))
    }

    /// Spatial field `c x h x w x d` mixing pooled text into each position.
    fn field(&self, shape: [usize; 3]) -> Arc<Array4<f64>> {
        let mut cache = self.fields.lock().expect("field cache");
        Arc::clone(cache.entry(shape).or_insert_with(|| {
            let [c, h, w] = shape;
            let label = format!("field:{c}x{h}x{w}");
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, &label));
            Arc::new(Array4::from_shape_simple_fn((c, h, w, self.config.embed_dim), || rng.random_range(-1.0..1.0)))
        }))
    }

    fn pooled_text(cond: &PromptEmbedding) -> Array1<f64> {
        let rows: Vec<usize> =
            cond.token_kinds.iter().enumerate().filter(|(_, k)| **k != TokenKind::Pad).map(|(i, _)| i).collect();
        let mut acc = Array1::zeros(cond.vectors.ncols());
        for &i in &rows {
            acc += &cond.vectors.row(i);
        }
        acc / rows.len() as f64
    }

    /// `b(tau)`, the prompt-dependent part of the prediction.
    fn text_term(&self, shape: [usize; 3], cond: &PromptEmbedding) -> Latent {
        let pooled = Self::pooled_text(cond);
        let per_channel = self.weights.get("text_proj").dot(&pooled);
        let bias = self.weights.get("bias");
        let field = self.field(shape);
        let [c, h, w] = shape;
        Array3::from_shape_fn((c, h, w), |(ci, y, x)| {
            let local: f64 = field.slice(s![ci, y, x, ..]).dot(&pooled);
            per_channel[ci] + bias[[ci, 0]] + FIELD_GAIN * local
        })
    }

    /// `M z` for mode B: a channel mix plus a channel mix of the diagonally
    /// shifted latent, each scaled by one half.
    fn coupling_term(&self, z: &Latent) -> Latent {
        let (c, h, w) = z.dim();
        let mc = self.weights.get("mix.channel");
        let ms = self.weights.get("mix.shift");
        Array3::from_shape_fn((c, h, w), |(ci, y, x)| {
            let (ys, xs) = ((y + 1) % h, (x + 1) % w);
            let mut v = 0.0;
            for k in 0..c {
                v += mc[[ci, k]] * z[[k, y, x]] + ms[[ci, k]] * z[[k, ys, xs]];
            }
            0.5 * v
        })
    }

    fn grid(shape: [usize; 3], factor: usize) -> [usize; 2] {
        [shape[1].div_ceil(factor), shape[2].div_ceil(factor)]
    }

    fn site_info(&self, shape: [usize; 3], site: &ToySite) -> SiteInfo {
        let grid = Self::grid(shape, site.factor);
        let tokens_q = grid[0] * grid[1];
        let (tokens_k, d_k) = match site.kind {
            SiteKind::SelfAttention => (tokens_q, self.config.channels + POS_DIMS),
            SiteKind::Cross => (self.config.max_tokens, self.config.embed_dim),
        };
        SiteInfo { name: site.name.clone(), kind: site.kind, grid, tokens_q, tokens_k, heads: site.heads, d_k }
    }

    /// Cell features: mean latent over the cell plus a positional code.
    fn cell_features(z: &Latent, factor: usize, grid: [usize; 2]) -> Array2<f64> {
        let (c, h, w) = z.dim();
        let mut feats = Array2::zeros((grid[0] * grid[1], c + POS_DIMS));
        for gy in 0..grid[0] {
            for gx in 0..grid[1] {
                let cell = gy * grid[1] + gx;
                let ys = gy * factor..((gy + 1) * factor).min(h);
                let xs = gx * factor..((gx + 1) * factor).min(w);
                let n = (ys.len() * xs.len()) as f64;
                for ci in 0..c {
                    feats[[cell, ci]] = z.slice(s![ci, ys.clone(), xs.clone()]).sum() / n;
                }
                let (fy, fx) = (gy as f64 / grid[0] as f64, gx as f64 / grid[1] as f64);
                let pi = std::f64::consts::PI;
                feats[[cell, c]] = (pi * fy).sin();
                feats[[cell, c + 1]] = (pi * fy).cos();
                feats[[cell, c + 2]] = (pi * fx).sin();
                feats[[cell, c + 3]] = (pi * fx).cos();
            }
        }
        feats
    }

    fn attention_probs(
        &self,
        site: &ToySite,
        info: &SiteInfo,
        queries: &Array2<f64>,
        cond: &PromptEmbedding,
    ) -> Array3<f64> {
        let keys = match site.kind {
            SiteKind::SelfAttention => queries,
            SiteKind::Cross => &cond.vectors,
        };
        let qk = self.weights.get(&format!("attn.{}.qk", site.name));
        let dq = queries.ncols();
        let scale = SHARPNESS / (info.d_k as f64).sqrt();
        let mut logits = Array3::zeros(info.map_shape());
        for h in 0..info.heads {
            let w = qk.slice(s![h * dq..(h + 1) * dq, ..]);
            let scores = queries.dot(&w).dot(&keys.t()) * scale;
            logits.slice_mut(s![h, .., ..]).assign(&scores);
        }
        softmax_rows(&mut logits);
        logits
    }

    /// Seeded value vectors `heads x tokens_k x channels` for a site.
    fn values(&self, info: &SiteInfo) -> Array3<f64> {
        let label = format!("value:{}:{}", info.name, info.tokens_k);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, &label));
        Array3::from_shape_simple_fn((info.heads, info.tokens_k, self.config.channels), || rng.random_range(-1.0..1.0))
    }

    fn add_injection_effect(&self, eps: &mut Latent, site: &ToySite, info: &SiteInfo, diff: &Array3<f64>) {
        let values = self.values(info);
        let (c, h, w) = eps.dim();
        let gain = self.config.injection_gain / info.heads as f64;
        let mut per_cell = Array2::<f64>::zeros((info.tokens_q, c));
        for head in 0..info.heads {
            per_cell += &diff.slice(s![head, .., ..]).dot(&values.slice(s![head, .., ..]));
        }
        for y in 0..h {
            for x in 0..w {
                let cell = (y / site.factor) * info.grid[1] + x / site.factor;
                for ci in 0..c {
                    eps[[ci, y, x]] += gain * per_cell[[cell, ci]];
                }
            }
        }
    }

    fn check_latent(&self, z: &Latent) -> Result<(), BackendError> {
        if z.dim().0 != self.config.channels || z.dim().1 == 0 || z.dim().2 == 0 {
            return Err(BackendError::ShapeMismatch(format!(
                "toy latent must be {} x H x W, got {:?}",
                self.config.channels,
                z.dim()
            )));
        }
        Ok(())
    }
}

impl DiffusionBackend for ToyAffineBackend {
    fn id(&self) -> String {
        let mode = match self.config.mode {
            ToyMode::A => "a",
            ToyMode::B => "b",
        };
        let cfg = serde_json::to_string(&self.config).unwrap_or_default();
        let digest = crate::tensor::ContentHasher::new().str(&cfg).finish_hex();
        format!("toy-{mode}:{}:{}", &digest[..12], self.weights.active_adapter().unwrap_or("base"))
    }

    fn beta_schedule(&self) -> BetaSchedule {
        self.config.beta
    }

    fn downscale(&self) -> usize {
        1
    }

    fn image_channels(&self) -> usize {
        self.config.channels
    }

    fn latent_channels(&self) -> usize {
        self.config.channels
    }

    fn site_registry(&self, latent_shape: [usize; 3]) -> Vec<SiteInfo> {
        self.config.sites.iter().map(|s| self.site_info(latent_shape, s)).collect()
    }

    fn encode(&self, image: &Image) -> Result<Latent, BackendError> {
        let [c, h, w] = shape3(image);
        if c != self.config.channels {
            return Err(BackendError::ChannelCount { expected: self.config.channels, got: c });
        }
        self.latent_shape(h, w)?;
        Ok(image.clone())
    }

    fn decode(&self, latent: &Latent) -> Result<Image, BackendError> {
        self.check_latent(latent)?;
        Ok(latent.clone())
    }

    fn embed(&self, prompt: &str) -> Result<PromptEmbedding, BackendError> {
        let tokenizer = WordTokenizer { max_tokens: self.config.max_tokens };
        let (words, token_kinds) = tokenizer.tokenize(prompt)?;
        let mut vectors = Array2::zeros((token_kinds.len(), self.config.embed_dim));
        for (i, kind) in token_kinds.iter().enumerate() {
            let key = match kind {
                TokenKind::Bos => "<bos>",
                TokenKind::Eos => "<eos>",
                TokenKind::Pad => "<pad>",
                TokenKind::Word(n) => words[*n].as_str(),
            };
            vectors.row_mut(i).assign(&self.token_vector(key));
        }
        Ok(PromptEmbedding {
            text: prompt.to_string(),
            is_unconditional: words.is_empty(),
            words,
            token_kinds,
            vectors,
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
        self.check_latent(z)?;
        if t == 0 || t > steps {
            return Err(BackendError::TimestepOutOfRange { t, steps });
        }
        if cond.vectors.dim() != (self.config.max_tokens, self.config.embed_dim) {
            return Err(BackendError::ShapeMismatch(format!("embedding is {:?}", cond.vectors.dim())));
        }
        let shape = shape3(z);
        let mut eps = self.text_term(shape, cond);
        if self.config.mode == ToyMode::B {
            eps += &self.coupling_term(z);
        }
        let mut features: HashMap<usize, Array2<f64>> = HashMap::new();
        for site in &self.config.sites {
            let info = self.site_info(shape, site);
            if !hook.wants_site(&info) {
                continue;
            }
            let queries = features.entry(site.factor).or_insert_with(|| Self::cell_features(z, site.factor, info.grid));
            let computed = self.attention_probs(site, &info, queries, cond);
            let mut used = computed.clone();
            hook.on_attention(&info, &mut used)?;
            if used != computed {
                let diff = &used - &computed;
                self.add_injection_effect(&mut eps, site, &info, &diff);
            }
        }
        Ok(eps)
    }

    fn load_style_adapter(&mut self, adapter: &StyleAdapter) -> Result<(), BackendError> {
        self.weights.merge(adapter, Self::is_adaptable)
    }

    fn unload_style_adapter(&mut self) {
        self.weights.reset();
    }
}
