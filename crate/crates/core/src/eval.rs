//! Fidelity/editability sweeps over a dataset manifest.
//!
//! For every manifest entry the image is inverted once; each start iteration
//! of the sweep then reuses that inversion. Per-row metrics and per-point
//! means are reported as CSV or JSON.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::DiffusionBackend;
use crate::imageio::ImageInput;
use crate::pipeline::{edit_with_inputs, resolve_inputs, EditContext, EditRequest};
use crate::tensor::{derive_seed, Image};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },
    #[error("invalid sweep: {0}")]
    InvalidSweep(String),
    #[error("report: {0}")]
    Report(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EvalError + '_ {
    move |source| EvalError::Io { path: path.display().to_string(), source }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    /// Image path, relative to the manifest's directory unless absolute.
    pub image: String,
    #[serde(alias = "source_prompt")]
    pub original_prompt: String,
    pub target_prompt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_prompt: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub id: String,
    pub base_dir: PathBuf,
    pub entries: Vec<ManifestEntry>,
    pub warnings: Vec<String>,
}

impl DatasetManifest {
    pub fn image_path(&self, entry: &ManifestEntry) -> PathBuf {
        self.base_dir.join(&entry.image)
    }
}

/// Reads a JSONL manifest; blank lines are skipped.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest, EvalError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut entries = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line_no = n + 1;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry =
            serde_json::from_str(line).map_err(|e| EvalError::Manifest { line: line_no, message: e.to_string() })?;
        for (field, value) in [("original_prompt", &entry.original_prompt), ("target_prompt", &entry.target_prompt)] {
            if value.trim().is_empty() {
                return Err(EvalError::Manifest { line: line_no, message: format!("{field} is empty") });
            }
        }
        if !base_dir.join(&entry.image).exists() {
            return Err(EvalError::Manifest {
                line: line_no,
                message: format!("image {} does not exist", entry.image),
            });
        }
        entries.push(entry);
    }
    let mut warnings = Vec::new();
    if entries.is_empty() {
        let w = format!("manifest {} has no entries", path.display());
        log::warn!("{w}");
        warnings.push(w);
    }
    let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(DatasetManifest { id, base_dir, entries, warnings })
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("{provider}: {message}")]
pub struct ProviderError {
    pub provider: String,
    pub message: String,
}

/// Perceptual distance between two images (lower is closer).
pub trait LpipsProvider: Send + Sync {
    fn name(&self) -> String;
    fn version(&self) -> String;
    fn distance(&self, a: &Image, b: &Image) -> Result<f64, ProviderError>;
}

/// Image/text agreement (higher is better).
pub trait ClipProvider: Send + Sync {
    fn name(&self) -> String;
    fn version(&self) -> String;
    fn score(&self, image: &Image, text: &str) -> Result<f64, ProviderError>;
}

/// Distribution distance between two image sets.
pub trait FidProvider: Send + Sync {
    fn name(&self) -> String;
    fn version(&self) -> String;
    fn fid(&self, reference: &[Image], generated: &[Image]) -> Result<f64, ProviderError>;
}

/// Stand-in for LPIPS: mean absolute pixel difference.
#[derive(Debug, Clone, Copy, Default)]
pub struct MeanAbsLpips;

impl LpipsProvider for MeanAbsLpips {
    fn name(&self) -> String {
        "mean-abs-stub".into()
    }

    fn version(&self) -> String {
        "1".into()
    }

    fn distance(&self, a: &Image, b: &Image) -> Result<f64, ProviderError> {
        if a.dim() != b.dim() || a.is_empty() {
            return Err(ProviderError {
                provider: self.name(),
                message: format!("cannot compare {:?} with {:?}", a.dim(), b.dim()),
            });
        }
        Ok((a - b).mapv(f64::abs).mean().expect("non-empty"))
    }
}

/// Stand-in for CLIP score: cosine similarity, scaled to `[0, 100]`, between
/// 4x4-pooled centered image features and a sum of seeded per-word vectors.
#[derive(Debug, Clone, Copy, Default)]
pub struct HashedClip {
    pub seed: u64,
}

const CLIP_GRID: usize = 4;

impl HashedClip {
    fn image_features(image: &Image) -> Vec<f64> {
        let (c, h, w) = image.dim();
        let mut feats = vec![0.0; c * CLIP_GRID * CLIP_GRID];
        let mut counts = [0usize; CLIP_GRID * CLIP_GRID];
        for ((ch, y, x), &v) in image.indexed_iter() {
            let cell = (y * CLIP_GRID / h) * CLIP_GRID + x * CLIP_GRID / w;
            feats[ch * CLIP_GRID * CLIP_GRID + cell] += v;
            if ch == 0 {
                counts[cell] += 1;
            }
        }
        for (i, f) in feats.iter_mut().enumerate() {
            *f /= counts[i % (CLIP_GRID * CLIP_GRID)].max(1) as f64;
        }
        let mean = feats.iter().sum::<f64>() / feats.len() as f64;
        feats.iter().map(|f| f - mean).collect()
    }

    fn text_features(&self, text: &str, dim: usize) -> Vec<f64> {
        use rand::{Rng, SeedableRng};
        let mut acc = vec![0.0; dim];
        for word in crate::backend::WordTokenizer::words(text) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &format!("clip:{word}")));
            for a in acc.iter_mut() {
                *a += rng.random_range(-1.0..1.0);
            }
        }
        acc
    }
}

impl ClipProvider for HashedClip {
    fn name(&self) -> String {
        "hashed-clip-stub".into()
    }

    fn version(&self) -> String {
        format!("1/seed{}", self.seed)
    }

    fn score(&self, image: &Image, text: &str) -> Result<f64, ProviderError> {
        if image.is_empty() {
            return Err(ProviderError { provider: self.name(), message: "empty image".into() });
        }
        let img = Self::image_features(image);
        let txt = self.text_features(text, img.len());
        let dot: f64 = img.iter().zip(&txt).map(|(a, b)| a * b).sum();
        let norm = img.iter().map(|v| v * v).sum::<f64>().sqrt() * txt.iter().map(|v| v * v).sum::<f64>().sqrt();
        Ok(if norm > 0.0 { 100.0 * (dot / norm).max(0.0) } else { 0.0 })
    }
}

#[derive(Default)]
pub struct Providers {
    pub lpips: Option<Box<dyn LpipsProvider>>,
    pub clip: Option<Box<dyn ClipProvider>>,
    pub fid: Option<Box<dyn FidProvider>>,
}

impl Providers {
    /// The deterministic stand-ins, without FID.
    pub fn stubs() -> Self {
        Self { lpips: Some(Box::new(MeanAbsLpips)), clip: Some(Box::new(HashedClip::default())), fid: None }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub lpips: Option<f64>,
    pub clip: Option<f64>,
    /// `name@version` of the providers used.
    pub lpips_provider: Option<String>,
    pub clip_provider: Option<String>,
    /// Provider failures; the corresponding metric is `None`.
    pub errors: Vec<String>,
}

pub fn compute_metrics(original: &Image, edited: &Image, target_prompt: &str, providers: &Providers) -> Metrics {
    let mut m = Metrics::default();
    if let Some(p) = &providers.lpips {
        m.lpips_provider = Some(format!("{}@{}", p.name(), p.version()));
        match p.distance(original, edited) {
            Ok(v) => m.lpips = Some(v),
            Err(e) => m.errors.push(e.to_string()),
        }
    }
    if let Some(p) = &providers.clip {
        m.clip_provider = Some(format!("{}@{}", p.name(), p.version()));
        match p.score(edited, target_prompt) {
            Ok(v) => m.clip = Some(v),
            Err(e) => m.errors.push(e.to_string()),
        }
    }
    m
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub label: String,
    /// FID is computed only for points with at least this many runs.
    pub fid_floor: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self { label: "lams".into(), fid_floor: 50 }
    }
}

/// One edit of the sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub entry: usize,
    pub image: String,
    pub label: String,
    pub start_iteration: usize,
    pub lpips: Option<f64>,
    pub clip: Option<f64>,
    pub inversion_cache_hit: bool,
    pub error: Option<String>,
}

/// Aggregate of one sweep value. Field order is the report column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffPoint {
    pub label: String,
    pub start_iteration: usize,
    pub lpips: Option<f64>,
    pub clip: Option<f64>,
    pub fid: Option<f64>,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutcome {
    pub points: Vec<TradeoffPoint>,
    pub rows: Vec<SweepRow>,
    /// Inversions actually computed (cache misses).
    pub inversions: usize,
    pub warnings: Vec<String>,
}

/// Distinct values in first-seen order, plus a warning when any were dropped.
pub fn dedupe_sweep(values: &[usize]) -> (Vec<usize>, Option<String>) {
    let mut seen = BTreeSet::new();
    let unique: Vec<usize> = values.iter().copied().filter(|v| seen.insert(*v)).collect();
    let warning =
        (unique.len() != values.len()).then(|| format!("duplicate sweep values removed: {values:?} -> {unique:?}"));
    (unique, warning)
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Runs `template` over every manifest entry at every start iteration.
///
/// Entry prompts and image replace the template's. Edit and metric failures
/// are recorded per row.
pub fn run_sweep<B: DiffusionBackend + ?Sized>(
    manifest: &DatasetManifest,
    template: &EditRequest,
    start_iterations: &[usize],
    backend: &mut B,
    providers: &Providers,
    ctx: &EditContext<'_>,
    config: &SweepConfig,
) -> Result<SweepOutcome, EvalError> {
    let (sweep, warning) = dedupe_sweep(start_iterations);
    let mut warnings: Vec<String> = manifest.warnings.clone();
    if let Some(w) = warning {
        log::warn!("{w}");
        warnings.push(w);
    }
    let steps = template.sampler.steps;
    if let Some(bad) = sweep.iter().find(|&&k| k >= steps) {
        return Err(EvalError::InvalidSweep(format!("start iteration {bad} outside [0, {}]", steps.saturating_sub(1))));
    }

    let mut rows = Vec::new();
    let mut images: Vec<Vec<(Image, Image)>> = vec![Vec::new(); sweep.len()];
    let mut inversions = 0;
    for (idx, entry) in manifest.entries.iter().enumerate() {
        let mut req = template.clone();
        req.image = ImageInput::Path(manifest.image_path(entry).display().to_string());
        req.source_prompt = entry.original_prompt.clone();
        req.target_prompt = entry.target_prompt.clone();
        if entry.mask_prompt.is_some() {
            req.mask_prompt = entry.mask_prompt.clone();
        }
        let row = |k: usize| SweepRow {
            entry: idx,
            image: entry.image.clone(),
            label: config.label.clone(),
            start_iteration: k,
            lpips: None,
            clip: None,
            inversion_cache_hit: false,
            error: None,
        };
        let inputs = match resolve_inputs(&req, &*backend, ctx) {
            Ok(i) => i,
            Err(e) => {
                rows.extend(sweep.iter().map(|&k| SweepRow { error: Some(e.to_string()), ..row(k) }));
                continue;
            }
        };
        for (p, &k) in sweep.iter().enumerate() {
            req.start_iteration = k;
            match edit_with_inputs(&req, &inputs, backend, ctx, &mut |_| {}) {
                Ok(result) => {
                    if !result.summary.inversion_cache_hit {
                        inversions += 1;
                    }
                    let m = compute_metrics(&inputs.image, &result.edited, &req.target_prompt, providers);
                    rows.push(SweepRow {
                        lpips: m.lpips,
                        clip: m.clip,
                        inversion_cache_hit: result.summary.inversion_cache_hit,
                        error: (!m.errors.is_empty()).then(|| m.errors.join("; ")),
                        ..row(k)
                    });
                    images[p].push((inputs.image.clone(), result.edited));
                }
                Err(e) => rows.push(SweepRow { error: Some(e.to_string()), ..row(k) }),
            }
        }
    }

    let points = sweep
        .iter()
        .enumerate()
        .map(|(p, &k)| {
            let at_k = || rows.iter().filter(move |r| r.start_iteration == k);
            let n = images[p].len();
            let fid = match &providers.fid {
                Some(f) if n >= config.fid_floor && n > 0 => {
                    let (refs, gens): (Vec<Image>, Vec<Image>) = images[p].iter().cloned().unzip();
                    f.fid(&refs, &gens).map_err(|e| log::warn!("FID unavailable: {e}")).ok()
                }
                _ => None,
            };
            TradeoffPoint {
                label: config.label.clone(),
                start_iteration: k,
                lpips: mean(at_k().filter_map(|r| r.lpips)),
                clip: mean(at_k().filter_map(|r| r.clip)),
                fid,
                n,
            }
        })
        .collect();
    Ok(SweepOutcome { points, rows, inversions, warnings })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
}

impl ReportFormat {
    /// `.json` is JSON, anything else CSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => ReportFormat::Json,
            _ => ReportFormat::Csv,
        }
    }
}

pub const REPORT_COLUMNS: [&str; 6] = ["label", "start_iteration", "lpips", "clip", "fid", "n"];
const ROW_COLUMNS: [&str; 8] =
    ["entry", "image", "label", "start_iteration", "lpips", "clip", "inversion_cache_hit", "error"];

fn write_csv<T: Serialize>(header: &[&str], items: &[T], path: &Path) -> Result<(), EvalError> {
    let mut w =
        csv::WriterBuilder::new().has_headers(false).from_path(path).map_err(|e| EvalError::Report(e.to_string()))?;
    w.write_record(header).map_err(|e| EvalError::Report(e.to_string()))?;
    for item in items {
        w.serialize(item).map_err(|e| EvalError::Report(e.to_string()))?;
    }
    w.flush().map_err(io_err(path))
}

fn write_json<T: Serialize>(items: &[T], path: &Path) -> Result<(), EvalError> {
    let mut json = serde_json::to_vec_pretty(items).map_err(|e| EvalError::Report(e.to_string()))?;
    json.push(b'\n');
    fs::write(path, json).map_err(io_err(path))
}

fn read_items<T: for<'de> Deserialize<'de>>(format: ReportFormat, path: &Path) -> Result<Vec<T>, EvalError> {
    match format {
        ReportFormat::Json => {
            let raw = fs::read(path).map_err(io_err(path))?;
            serde_json::from_slice(&raw).map_err(|e| EvalError::Report(e.to_string()))
        }
        ReportFormat::Csv => {
            let mut r = csv::Reader::from_path(path).map_err(|e| EvalError::Report(e.to_string()))?;
            r.deserialize().collect::<Result<_, _>>().map_err(|e| EvalError::Report(e.to_string()))
        }
    }
}

pub fn emit_report(points: &[TradeoffPoint], format: ReportFormat, path: &Path) -> Result<(), EvalError> {
    match format {
        ReportFormat::Csv => write_csv(&REPORT_COLUMNS, points, path),
        ReportFormat::Json => write_json(points, path),
    }
}

pub fn read_report(format: ReportFormat, path: &Path) -> Result<Vec<TradeoffPoint>, EvalError> {
    read_items(format, path)
}

pub fn emit_rows(rows: &[SweepRow], format: ReportFormat, path: &Path) -> Result<(), EvalError> {
    match format {
        ReportFormat::Csv => write_csv(&ROW_COLUMNS, rows, path),
        ReportFormat::Json => write_json(rows, path),
    }
}

pub fn read_rows(format: ReportFormat, path: &Path) -> Result<Vec<SweepRow>, EvalError> {
    read_items(format, path)
}

/// Path of the per-row file that accompanies a report.
pub fn rows_path(report: &Path) -> PathBuf {
    let stem = report.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "report".into());
    let ext = report.extension().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "csv".into());
    report.with_file_name(format!("{stem}.rows.{ext}"))
}
