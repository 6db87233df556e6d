use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use lams_core::backend::build_backend;
use lams_core::eval::{
    compute_metrics, emit_report, emit_rows, load_manifest, rows_path, run_sweep, EvalError, Providers, ReportFormat,
    SweepConfig,
};
use lams_core::imageio::{encode_png, load_image};
use lams_core::masking::encode_mask_png;
use lams_core::pipeline::{edit, reconstruct, PipelineError, SamplerConfig};
use lams_core::schedule::{preview_schedule, SchedulerSpec};
use lams_core::tensor::max_abs_diff;
use lams_core::trajectory::TrajectoryStore;
use lams_service::{
    build_segmenter, edit_context, parse_request, ArtifactRef, JobState, RunRecord, RunResult, Service, ServiceConfig,
    SubmitError,
};
use serde_json::{json, Value};

use crate::{Cli, Command, EditArgs, EvalArgs, InvertArgs, PreviewArgs, ServeArgs, UsageError};

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub fn run(cli: Cli) -> Result<()> {
    let mut settings = match &cli.settings {
        Some(path) => ServiceConfig::from_file(path).map_err(|e| usage(e.to_string()))?,
        None => ServiceConfig::default(),
    }
    .with_env()
    .map_err(|e| usage(e.to_string()))?;
    if let Some(kind) = cli.backend {
        settings.backend.backend = kind;
    }
    match cli.command {
        Command::Invert(args) => invert(&settings, args),
        Command::Edit(args) => edit_image(&settings, *args),
        Command::SchedulerPreview(args) => scheduler_preview(args),
        Command::Eval(args) => eval(&settings, args),
        Command::Serve(args) => serve(settings, args),
    }
}

fn existing(path: &Path, flag: &str) -> Result<PathBuf> {
    if !path.is_file() {
        return Err(usage(format!("{flag}: {} does not exist", path.display())));
    }
    Ok(std::fs::canonicalize(path)?)
}

fn pipeline_error(e: PipelineError) -> anyhow::Error {
    match e {
        PipelineError::Invalid(_) => usage(e.to_string()),
        other => other.into(),
    }
}

fn invert(settings: &ServiceConfig, args: InvertArgs) -> Result<()> {
    let image_path = existing(&args.image, "--image")?;
    let image = load_image(&image_path).map_err(|e| usage(format!("--image: {e}")))?;
    let backend = build_backend(&settings.backend)?;
    let mut store_cfg = settings.store.clone();
    store_cfg.cache_dir = Some(args.out.join("cache"));
    let store = TrajectoryStore::new(store_cfg);
    let ctx = edit_context(settings, &store, None);
    let guidance = args.guidance.unwrap_or(settings.backend.inversion_guidance);
    // Regenerate with the inversion guidance so the reconstruction is a
    // true round trip.
    let sampler = SamplerConfig {
        steps: args.steps.unwrap_or(settings.backend.steps),
        guidance,
        inversion_guidance: guidance,
        seed: args.seed.unwrap_or(settings.backend.seed),
    };
    let rec = reconstruct(&image, &args.prompt, &sampler, &*backend, &ctx).map_err(pipeline_error)?;
    std::fs::create_dir_all(&args.out)?;
    let preview = args.out.join("reconstruction.png");
    std::fs::write(&preview, encode_png(&rec.image)?).with_context(|| preview.display().to_string())?;
    println!("cache key: {}", rec.inversion_key);
    println!("{}", if rec.inversion_cache_hit { "cache hit" } else { "cache miss" });
    println!("max-abs error: {:.3e}", max_abs_diff(&rec.image, &image));
    println!("reconstruction: {}", preview.display());
    Ok(())
}

/// The request JSON: the `--config` file overlaid with the given flags.
fn request_json(args: &EditArgs) -> Result<Value> {
    let mut body = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| usage(format!("--config {}: {e}", path.display())))?;
            serde_json::from_str(&text).map_err(|e| usage(format!("--config {}: {e}", path.display())))?
        }
        None => json!({}),
    };
    let Some(obj) = body.as_object_mut() else {
        bail!(usage("--config must hold a JSON object"));
    };
    if let Some(p) = &args.image {
        obj.insert("image".into(), json!({ "path": existing(p, "--image")?.display().to_string() }));
    }
    if let Some(p) = &args.mask {
        obj.insert("mask".into(), json!({ "path": existing(p, "--mask")?.display().to_string() }));
    }
    let mut set = |key: &str, value: Option<Value>| {
        if let Some(v) = value {
            obj.insert(key.into(), v);
        }
    };
    set("source_prompt", args.source_prompt.clone().map(Value::from));
    set("target_prompt", args.target_prompt.clone().map(Value::from));
    set("mask_prompt", args.mask_prompt.clone().map(Value::from));
    set("attention_schedule", args.wa.map(|s| json!(s)));
    set("latent_schedule", args.wz.map(|s| json!(s)));
    set("adapter", args.lora.as_ref().map(|p| json!({ "path": p, "scale": args.lora_scale })));
    set("start_iteration", args.start_iter.map(Value::from));
    let mut sampler = obj.get("sampler").cloned().unwrap_or_else(|| json!({}));
    for (key, value) in [
        ("steps", args.steps.map(Value::from)),
        ("guidance", args.guidance.map(Value::from)),
        ("seed", args.seed.map(Value::from)),
    ] {
        if let Some(v) = value {
            sampler[key] = v;
        }
    }
    obj.insert("sampler".into(), sampler);
    for (key, flag) in
        [("image", "--image"), ("source_prompt", "--source-prompt"), ("target_prompt", "--target-prompt")]
    {
        if !obj.contains_key(key) {
            bail!(usage(format!("{flag} is required (or set `{key}` in --config)")));
        }
    }
    Ok(body)
}

fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "edited".into());
    out.with_file_name(format!("{stem}.{suffix}"))
}

fn edit_image(settings: &ServiceConfig, args: EditArgs) -> Result<()> {
    let body = request_json(&args)?;
    let request = parse_request(body, &settings.backend).map_err(|e| match e {
        SubmitError::Invalid(fields) => usage(fields.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")),
        other => other.into(),
    })?;
    let mut backend = build_backend(&settings.backend)?;
    let store = TrajectoryStore::new(settings.store.clone());
    let segmenter = build_segmenter(&settings.segmentation);
    let ctx = edit_context(settings, &store, segmenter.as_deref());
    let mut on_progress = |p| log::debug!("{p:?}");
    let out = edit(&request, &mut backend, &ctx, &mut on_progress).map_err(pipeline_error)?;

    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let write = |path: &Path, bytes: &[u8]| -> Result<ArtifactRef> {
        std::fs::write(path, bytes).with_context(|| path.display().to_string())?;
        Ok(ArtifactRef::png(bytes))
    };
    let edited = write(&args.out, &encode_png(&out.edited)?)?;
    let reconstruction = write(&sibling(&args.out, "reconstruction.png"), &encode_png(&out.reconstruction)?)?;
    let mask = match &out.mask {
        Some(m) => Some(write(&sibling(&args.out, "mask.png"), &encode_mask_png(&m.image)?)?),
        None => None,
    };
    let original = request.image.load(ctx.base_dir.as_deref())?;
    let metrics = compute_metrics(&original, &out.edited, &request.target_prompt, &Providers::stubs());
    let hash = out.summary.request_hash.clone();
    let mut record = RunRecord::new(format!("{}-cli", &hash[..16]), request, hash, out.summary.backend_id.clone());
    record.state = JobState::Done;
    record.result = Some(RunResult { edited, reconstruction, mask, summary: out.summary, metrics });
    let sidecar = sibling(&args.out, "json");
    std::fs::write(&sidecar, serde_json::to_vec_pretty(&record)?).with_context(|| sidecar.display().to_string())?;
    if let Some(w) = record.result.as_ref().and_then(|r| r.summary.mask.as_ref()).and_then(|m| m.warning.as_ref()) {
        eprintln!("warning: {w}");
    }
    println!("edited: {}", args.out.display());
    println!("sidecar: {}", sidecar.display());
    println!("output hash: {}", record.result.as_ref().map(|r| r.summary.output_hash.as_str()).unwrap_or_default());
    Ok(())
}

fn scheduler_preview(args: PreviewArgs) -> Result<()> {
    let spec = args.wz.or(args.wa).unwrap_or_else(SchedulerSpec::default_attention);
    let preview = preview_schedule(&spec, args.steps).map_err(|e| usage(e.to_string()))?;
    print!("{}", preview.table);
    if let Some(path) = &args.plot {
        crate::plot::write_curve(&preview.schedule.weights, path)?;
        eprintln!("plot: {}", path.display());
    }
    Ok(())
}

fn eval(settings: &ServiceConfig, args: EvalArgs) -> Result<()> {
    let manifest = load_manifest(&args.manifest).map_err(|e| match e {
        EvalError::Manifest { .. } | EvalError::Io { .. } => usage(format!("{}: {e}", args.manifest.display())),
        other => other.into(),
    })?;
    let mut body = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| usage(format!("--config {}: {e}", path.display())))?;
            serde_json::from_str(&text).map_err(|e| usage(format!("--config {}: {e}", path.display())))?
        }
        None => json!({}),
    };
    // Image and prompts come from the manifest.
    if let Some(obj) = body.as_object_mut() {
        obj.insert("image".into(), json!({ "base64": "" }));
        obj.entry("source_prompt").or_insert_with(|| json!("source"));
        obj.entry("target_prompt").or_insert_with(|| json!("target"));
    }
    let template = parse_request(body, &settings.backend).map_err(|e| usage(format!("--config: {e:?}")))?;
    let mut backend = build_backend(&settings.backend)?;
    let store = TrajectoryStore::new(settings.store.clone());
    let segmenter = build_segmenter(&settings.segmentation);
    let ctx = edit_context(settings, &store, segmenter.as_deref());
    let config = SweepConfig { label: args.label.clone(), ..SweepConfig::default() };
    let outcome = run_sweep(&manifest, &template, &args.sweep, &mut backend, &Providers::stubs(), &ctx, &config)
        .map_err(|e| match e {
            EvalError::InvalidSweep(_) => usage(format!("--sweep: {e}")),
            other => other.into(),
        })?;
    for w in &outcome.warnings {
        eprintln!("warning: {w}");
    }
    let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
    println!("{:<12} {:>6} {:>10} {:>10} {:>10} {:>4}", "label", "start", "lpips", "clip", "fid", "n");
    for p in &outcome.points {
        println!(
            "{:<12} {:>6} {:>10} {:>10} {:>10} {:>4}",
            p.label,
            p.start_iteration,
            fmt(p.lpips),
            fmt(p.clip),
            fmt(p.fid),
            p.n
        );
    }
    println!("inversions: {}", outcome.inversions);
    let failed: Vec<_> = outcome.rows.iter().filter(|r| r.error.is_some()).collect();
    if !failed.is_empty() {
        eprintln!(
            "warning: {} of {} edits failed; first: {}",
            failed.len(),
            outcome.rows.len(),
            failed[0].error.as_deref().unwrap_or("")
        );
    }
    if let Some(report) = &args.report {
        let format = ReportFormat::from_path(report);
        emit_report(&outcome.points, format, report)?;
        emit_rows(&outcome.rows, format, &rows_path(report))?;
        println!("report: {}", report.display());
    }
    Ok(())
}

fn serve(mut settings: ServiceConfig, args: ServeArgs) -> Result<()> {
    if let Some(port) = args.port {
        settings.port = port;
    }
    if let Some(host) = args.host {
        settings.host = host;
    }
    if let Some(dir) = args.data_dir {
        settings.data_dir = dir;
    }
    let addr = format!("{}:{}", settings.host, settings.port);
    let service = Service::start(settings)?;
    let runtime = tokio::runtime::Runtime::new()?;
    let result = runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(&addr).await.with_context(|| format!("binding {addr}"))?;
        println!("listening on http://{}", listener.local_addr()?);
        std::io::stdout().flush()?;
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
        };
        lams_service::serve(service.clone(), listener, shutdown).await?;
        anyhow::Ok(())
    });
    service.shutdown();
    result
}
