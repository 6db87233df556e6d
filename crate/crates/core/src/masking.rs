//! Region-of-interest masks from a text prompt.
//!
//! Segmentation itself is external: a [`SegmentationClient`] returns
//! run-length-encoded instance masks which are combined, binarized and
//! area-pooled to latent resolution.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::WordTokenizer;
use crate::tensor::Image;

/// Binary mask, entries 0 or 1.
pub type BinaryMask = Array2<u8>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SegmentationError {
    #[error("segmentation service unavailable: {0}")]
    Unavailable(String),
    #[error("bad segmentation response: {0}")]
    Protocol(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MaskError {
    #[error("mask prompt is empty")]
    EmptyPrompt,
    #[error("mask dimensions must be non-zero, got {0:?}")]
    ZeroSize([usize; 2]),
    #[error("mask is {got:?}, expected {expected:?}")]
    ShapeMismatch { expected: [usize; 2], got: [usize; 2] },
    #[error("mask entry {0} is not 0 or 1")]
    NonBinary(u8),
    #[error("run lengths cover {got} cells, mask has {expected}")]
    BadRle { expected: usize, got: usize },
    #[error("mask image: {0}")]
    Image(String),
    #[error(transparent)]
    Segmentation(#[from] SegmentationError),
}

impl MaskError {
    /// Whether retrying the same request may succeed.
    pub fn is_retryable(&self) -> bool {
        matches!(self, MaskError::Segmentation(SegmentationError::Unavailable(_)))
    }
}

/// Row-major run lengths, alternating zeros and ones, starting with zeros.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RleMask {
    pub height: usize,
    pub width: usize,
    pub counts: Vec<usize>,
}

impl RleMask {
    pub fn encode(mask: &BinaryMask) -> Self {
        let (height, width) = mask.dim();
        let mut counts = Vec::new();
        let (mut current, mut run) = (0u8, 0usize);
        for &v in mask.iter() {
            let v = v.min(1);
            if v != current {
                counts.push(run);
                current = v;
                run = 0;
            }
            run += 1;
        }
        counts.push(run);
        Self { height, width, counts }
    }

    pub fn decode(&self) -> Result<BinaryMask, MaskError> {
        let total: usize = self.counts.iter().sum();
        let expected = self.height * self.width;
        if total != expected {
            return Err(MaskError::BadRle { expected, got: total });
        }
        let mut flat = Vec::with_capacity(expected);
        for (i, &n) in self.counts.iter().enumerate() {
            flat.extend(std::iter::repeat_n((i % 2) as u8, n));
        }
        Ok(Array2::from_shape_vec((self.height, self.width), flat).expect("length checked"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationResponse {
    pub instances: Vec<RleMask>,
    pub scores: Vec<f64>,
}

/// A text-prompted segmentation model.
pub trait SegmentationClient: Send + Sync {
    fn name(&self) -> String;

    fn segment(&self, image: &Image, prompt: &str) -> Result<SegmentationResponse, SegmentationError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstancePolicy {
    /// Every matching instance.
    #[default]
    Union,
    /// Only the highest-scoring instance.
    TopScore,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskOptions {
    pub policy: InstancePolicy,
    /// Square dilation radius in latent cells.
    pub dilation: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation {
    pub mask: BinaryMask,
    pub instances: usize,
    /// Set when nothing matched the prompt.
    pub warning: Option<String>,
}

/// Image-resolution mask for `prompt`.
pub fn segment(
    image: &Image,
    prompt: &str,
    client: &dyn SegmentationClient,
    policy: InstancePolicy,
) -> Result<Segmentation, MaskError> {
    if prompt.trim().is_empty() {
        return Err(MaskError::EmptyPrompt);
    }
    let (_, h, w) = image.dim();
    let response = client.segment(image, prompt)?;
    if response.scores.len() != response.instances.len() {
        return Err(SegmentationError::Protocol(format!(
            "{} instances but {} scores",
            response.instances.len(),
            response.scores.len()
        ))
        .into());
    }
    let mut decoded = Vec::with_capacity(response.instances.len());
    for rle in &response.instances {
        let m = rle.decode()?;
        if m.dim() != (h, w) {
            return Err(MaskError::ShapeMismatch { expected: [h, w], got: [m.nrows(), m.ncols()] });
        }
        decoded.push(m);
    }
    let chosen: Vec<&BinaryMask> = match policy {
        InstancePolicy::Union => decoded.iter().collect(),
        InstancePolicy::TopScore => response
            .scores
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| &decoded[i])
            .into_iter()
            .collect(),
    };
    let mut mask = BinaryMask::zeros((h, w));
    for m in &chosen {
        mask.zip_mut_with(m, |a, &b| *a |= b);
    }
    let warning = (!mask.iter().any(|&v| v == 1)).then(|| format!("no region matches mask prompt `{prompt}`"));
    Ok(Segmentation { mask, instances: decoded.len(), warning })
}

fn check_binary(mask: &BinaryMask) -> Result<(), MaskError> {
    match mask.iter().find(|&&v| v > 1) {
        Some(&v) => Err(MaskError::NonBinary(v)),
        None => Ok(()),
    }
}

/// Area-pools `mask` onto a `dims` grid and keeps cells at least half covered.
///
/// Cell and pixel boundaries are compared on a common integer grid, so the
/// result is exact; with evenly dividing sizes this is block pooling.
pub fn to_latent_resolution(mask: &BinaryMask, dims: [usize; 2]) -> Result<BinaryMask, MaskError> {
    let (sh, sw) = mask.dim();
    if sh == 0 || sw == 0 || dims[0] == 0 || dims[1] == 0 {
        return Err(MaskError::ZeroSize(if sh == 0 || sw == 0 { [sh, sw] } else { dims }));
    }
    check_binary(mask)?;
    let [h, w] = dims;
    // Pixel y spans [y*h, (y+1)*h); cell ly spans [ly*sh, (ly+1)*sh).
    let overlap = |pixel: usize, pscale: usize, cell: usize, cscale: usize| -> u128 {
        let (p0, p1) = (pixel * pscale, (pixel + 1) * pscale);
        let (c0, c1) = (cell * cscale, (cell + 1) * cscale);
        p1.min(c1).saturating_sub(p0.max(c0)) as u128
    };
    let cell_area = (sh * sw) as u128;
    Ok(Array2::from_shape_fn((h, w), |(ly, lx)| {
        let y0 = ly * sh / h;
        let y1 = ((ly + 1) * sh).div_ceil(h).min(sh);
        let x0 = lx * sw / w;
        let x1 = ((lx + 1) * sw).div_ceil(w).min(sw);
        let mut covered = 0u128;
        for y in y0..y1 {
            let oy = overlap(y, h, ly, sh);
            if oy == 0 {
                continue;
            }
            for x in x0..x1 {
                if mask[[y, x]] == 1 {
                    covered += oy * overlap(x, w, lx, sw);
                }
            }
        }
        u8::from(2 * covered >= cell_area)
    }))
}

/// Square (Chebyshev) dilation.
pub fn dilate(mask: &BinaryMask, radius: usize) -> BinaryMask {
    if radius == 0 {
        return mask.clone();
    }
    let (h, w) = mask.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let ys = y.saturating_sub(radius)..(y + radius + 1).min(h);
        let xs = x.saturating_sub(radius)..(x + radius + 1).min(w);
        u8::from(ys.into_iter().any(|yy| xs.clone().any(|xx| mask[[yy, xx]] == 1)))
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskSource {
    Prompt,
    User,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoiMask {
    pub image: BinaryMask,
    pub latent: BinaryMask,
    pub source: MaskSource,
    pub prompt: Option<String>,
    pub warning: Option<String>,
}

impl RoiMask {
    pub fn from_prompt(
        image: &Image,
        prompt: &str,
        client: &dyn SegmentationClient,
        latent_dims: [usize; 2],
        options: MaskOptions,
    ) -> Result<Self, MaskError> {
        let seg = segment(image, prompt, client, options.policy)?;
        let latent = dilate(&to_latent_resolution(&seg.mask, latent_dims)?, options.dilation);
        Ok(Self {
            image: seg.mask,
            latent,
            source: MaskSource::Prompt,
            prompt: Some(prompt.to_string()),
            warning: seg.warning,
        })
    }

    pub fn from_user(mask: BinaryMask, latent_dims: [usize; 2], options: MaskOptions) -> Result<Self, MaskError> {
        let latent = dilate(&to_latent_resolution(&mask, latent_dims)?, options.dilation);
        Ok(Self { image: mask, latent, source: MaskSource::User, prompt: None, warning: None })
    }
}

/// 1-bit grayscale PNG.
pub fn encode_mask_png(mask: &BinaryMask) -> Result<Vec<u8>, MaskError> {
    check_binary(mask)?;
    let (h, w) = mask.dim();
    let stride = w.div_ceil(8);
    let mut packed = vec![0u8; stride * h];
    for ((y, x), &v) in mask.indexed_iter() {
        if v == 1 {
            packed[y * stride + x / 8] |= 0x80 >> (x % 8);
        }
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::One);
        let mut writer = enc.write_header().map_err(|e| MaskError::Image(e.to_string()))?;
        writer.write_image_data(&packed).map_err(|e| MaskError::Image(e.to_string()))?;
    }
    Ok(out)
}

/// Decodes any image as a mask: luma at least half of full scale is 1.
pub fn decode_mask_image(bytes: &[u8]) -> Result<BinaryMask, MaskError> {
    let img = image::load_from_memory(bytes).map_err(|e| MaskError::Image(e.to_string()))?.to_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| u8::from(img.get_pixel(x as u32, y as u32)[0] >= 128)))
}

/// Pixel rectangle `[top, top + height) x [left, left + width)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StubRule {
    /// Matches when this word occurs in the mask prompt.
    pub keyword: String,
    pub rects: Vec<Rect>,
    #[serde(default = "default_score")]
    pub score: f64,
}

fn default_score() -> f64 {
    0.9
}

/// Deterministic segmenter returning fixed rectangles per keyword.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StubSegmenter {
    pub rules: Vec<StubRule>,
    #[serde(default)]
    pub unavailable: bool,
}

impl StubSegmenter {
    pub fn new(rules: Vec<StubRule>) -> Self {
        Self { rules, unavailable: false }
    }

    pub fn offline() -> Self {
        Self { rules: Vec::new(), unavailable: true }
    }
}

impl SegmentationClient for StubSegmenter {
    fn name(&self) -> String {
        "stub".into()
    }

    fn segment(&self, image: &Image, prompt: &str) -> Result<SegmentationResponse, SegmentationError> {
        if self.unavailable {
            return Err(SegmentationError::Unavailable("stub segmenter is offline".into()));
        }
        let (_, h, w) = image.dim();
        let words = WordTokenizer::words(prompt);
        let mut instances = Vec::new();
        let mut scores = Vec::new();
        for (n, rule) in self.rules.iter().enumerate() {
            if !words.contains(&rule.keyword.to_lowercase()) {
                continue;
            }
            for (k, r) in rule.rects.iter().enumerate() {
                let mut m = BinaryMask::zeros((h, w));
                for y in r.top.min(h)..(r.top + r.height).min(h) {
                    for x in r.left.min(w)..(r.left + r.width).min(w) {
                        m[[y, x]] = 1;
                    }
                }
                instances.push(RleMask::encode(&m));
                // Later rectangles of a rule score slightly lower.
                scores.push(rule.score - 1e-3 * (n + k) as f64);
            }
        }
        Ok(SegmentationResponse { instances, scores })
    }
}
