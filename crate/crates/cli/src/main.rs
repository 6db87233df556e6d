//! `lams`: invert, edit, preview schedules, run sweeps and serve jobs.
//!
//! Exit status is 0 on success, 2 for usage errors (bad flags, missing
//! inputs, malformed manifests) and 1 for failures while running.

mod commands;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lams_core::backend::BackendKind;
use lams_core::schedule::SchedulerSpec;

#[derive(Parser)]
#[command(name = "lams", version, about = "Text-guided image editing with latent and attention mixing")]
struct Cli {
    /// Runtime settings file (TOML or JSON): backend, segmentation, storage.
    #[arg(long, global = true, value_name = "FILE")]
    settings: Option<PathBuf>,
    /// Backend override: toy-a, toy-b or real.
    #[arg(long, global = true, value_parser = parse_backend)]
    backend: Option<BackendKind>,
    /// More log output; repeat for debug.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Invert an image, cache its trajectories and write a reconstruction.
    Invert(InvertArgs),
    /// Edit an image and write it with a JSON sidecar.
    Edit(Box<EditArgs>),
    /// Print a mixing schedule, optionally plotting it.
    SchedulerPreview(PreviewArgs),
    /// Sweep start iterations over a manifest and report the trade-off.
    Eval(EvalArgs),
    /// Run the HTTP job service.
    Serve(ServeArgs),
}

#[derive(Args)]
struct InvertArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    prompt: String,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Guidance for inversion and regeneration.
    #[arg(long)]
    guidance: Option<f64>,
    /// Receives `cache/` and `reconstruction.png`.
    #[arg(long, default_value = "lams-out")]
    out: PathBuf,
}

#[derive(Args)]
struct EditArgs {
    #[arg(long)]
    image: Option<PathBuf>,
    #[arg(long)]
    source_prompt: Option<String>,
    #[arg(long)]
    target_prompt: Option<String>,
    /// Restrict the edit to what the segmenter finds for this text.
    #[arg(long)]
    mask_prompt: Option<String>,
    /// Binary mask image at image resolution; overrides --mask-prompt.
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Attention-mixing schedule `start,end,until,type`.
    #[arg(long, value_name = "SPEC")]
    wa: Option<SchedulerSpec>,
    /// Latent-mixing schedule `start,end,until,type`.
    #[arg(long, value_name = "SPEC")]
    wz: Option<SchedulerSpec>,
    /// Style adapter file or registry id.
    #[arg(long)]
    lora: Option<String>,
    #[arg(long, default_value_t = 1.0)]
    lora_scale: f64,
    /// Denoising iterations to skip.
    #[arg(long)]
    start_iter: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    guidance: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "edited.png")]
    out: PathBuf,
    /// Full edit request as JSON; flags override its fields.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct PreviewArgs {
    /// Schedule to preview (default: the attention default).
    #[arg(long, value_name = "SPEC")]
    wa: Option<SchedulerSpec>,
    /// Preview this latent schedule instead.
    #[arg(long, value_name = "SPEC", conflicts_with = "wa")]
    wz: Option<SchedulerSpec>,
    #[arg(long, default_value_t = 50)]
    steps: usize,
    /// Write the curve as a PNG.
    #[arg(long)]
    plot: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// JSON-lines manifest of images and prompts.
    #[arg(long)]
    manifest: PathBuf,
    /// Start iterations, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    sweep: Vec<usize>,
    /// CSV or JSON by extension; per-edit rows go next to it.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, default_value = "lams")]
    label: String,
    /// Edit request template as JSON (schedules, sampler, p2p).
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    /// 0 picks a free port.
    #[arg(long)]
    port: Option<u16>,
    #[arg(long)]
    host: Option<String>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

fn parse_backend(s: &str) -> Result<BackendKind, String> {
    serde_json::from_value(serde_json::Value::String(s.into()))
        .map_err(|_| format!("`{s}` is not toy-a, toy-b or real"))
}

/// An error caused by the invocation rather than by running it.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
