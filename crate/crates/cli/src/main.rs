//! `vidcam`: the source camera identification pipeline as subcommands.

mod commands;

use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

/// Exit status for usage errors (unknown flags, missing arguments).
pub const EXIT_USAGE: u8 = 1;
/// Exit status for bad or missing input data.
pub const EXIT_DATA: u8 = 2;
/// Exit status for numeric failures (non-finite values, gradient checks).
pub const EXIT_NUMERIC: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "vidcam", version, about = "Video source camera identification with a constrained ConvNet")]
struct Cli {
    /// Worker threads; defaults to the number of available cores.
    #[arg(long, global = true, env = "VIDCAM_JOBS")]
    jobs: Option<usize>,

    /// Record that bit-identical artifacts are required. Every computation
    /// already uses a fixed reduction order, so this only affects metadata.
    #[arg(long, global = true)]
    deterministic: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Apply the device selection rules to a video catalog.
    SelectDevices(SelectArgs),
    /// Build a leakage-free train/test split, or audit an existing one.
    Split(SplitArgs),
    /// Extract equally spaced frames from every video of a catalog.
    Sample(SampleArgs),
    /// Train a network on the training side of a split.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test side of a split.
    Evaluate(EvaluateArgs),
    /// Identify the source device of a single video.
    Classify(ClassifyArgs),
    /// Generate a synthetic dataset with known per-device noise patterns.
    Synth(SynthArgs),
    /// Finite-difference check of every backward pass.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct SelectArgs {
    /// Catalog CSV describing every video.
    #[arg(long, required_unless_present = "vision_root", conflicts_with = "vision_root")]
    pub catalog: Option<std::path::PathBuf>,
    /// Root of a VISION-style directory tree to scan instead of a catalog.
    #[arg(long)]
    pub vision_root: Option<std::path::PathBuf>,
    /// Device id or "brand model" to exclude; repeatable.
    #[arg(long = "exclude")]
    pub exclude: Vec<String>,
    /// Do not apply the built-in exclusion list.
    #[arg(long)]
    pub no_default_exclusions: bool,
    /// Output directory for devices.json, device_audit.csv and, when
    /// scanning, catalog.csv.
    #[arg(long)]
    #[serde(skip)]
    pub out: std::path::PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct SplitArgs {
    /// Audit an existing split manifest instead of building one.
    #[arg(long, conflicts_with_all = ["catalog", "devices", "out"])]
    pub audit: Option<std::path::PathBuf>,
    #[arg(long, required_unless_present = "audit")]
    pub catalog: Option<std::path::PathBuf>,
    /// devices.json from select-devices; all catalog devices when omitted.
    #[arg(long)]
    pub devices: Option<std::path::PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = vidcam::dataset::DEFAULT_TRAIN_FRACTION)]
    pub train_fraction: f64,
    #[arg(long, default_value_t = vidcam::dataset::DEFAULT_MAX_RETRIES)]
    pub max_retries: usize,
    /// Split CSV to write; metadata goes next to it as JSON.
    #[arg(long, required_unless_present = "audit")]
    #[serde(skip)]
    pub out: Option<std::path::PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct SampleArgs {
    /// Catalog CSV of the videos to sample.
    #[arg(long)]
    pub videos: std::path::PathBuf,
    /// Only sample videos listed in this split manifest.
    #[arg(long)]
    pub split: Option<std::path::PathBuf>,
    /// Frames per video.
    #[arg(long, default_value_t = 200)]
    pub frames: usize,
    #[arg(long)]
    #[serde(skip)]
    pub out: std::path::PathBuf,
    /// Allow repeated frames for videos shorter than --frames.
    #[arg(long)]
    pub allow_repeats: bool,
    #[arg(long, default_value = "ffmpeg")]
    pub ffmpeg: std::path::PathBuf,
    #[arg(long, default_value = "ffprobe")]
    pub ffprobe: std::path::PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    /// Architecture TOML; the full-size network when omitted.
    #[arg(long)]
    pub config: Option<std::path::PathBuf>,
    /// Use the reduced network sized to the training frames.
    #[arg(long, conflicts_with = "config")]
    pub reduced: bool,
    /// Replace the constrained layer with a plain convolution.
    #[arg(long)]
    pub unconstrained: bool,
    #[arg(long)]
    pub manifest: std::path::PathBuf,
    /// Frame directory written by `sample` or `synth`.
    #[arg(long)]
    pub frames: std::path::PathBuf,
    /// Checkpoint directory.
    #[arg(long)]
    #[serde(skip)]
    pub out: std::path::PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub decay: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<std::path::PathBuf>,
    /// Evaluate the test side after every epoch and log the video accuracy.
    #[arg(long)]
    pub eval_each_epoch: bool,
    /// Always resize frames instead of center-cropping larger ones.
    #[arg(long)]
    pub resize: bool,
    #[serde(skip)]
    #[arg(skip)]
    pub deterministic: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: std::path::PathBuf,
    #[arg(long)]
    pub manifest: std::path::PathBuf,
    #[arg(long)]
    pub frames: std::path::PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub out: std::path::PathBuf,
    /// majority, avgprob or threshold:<p>; the last two are experimental.
    #[arg(long, default_value = "majority")]
    pub voting: String,
    /// Skip test videos with missing frames instead of failing.
    #[arg(long)]
    pub allow_partial: bool,
    #[arg(long)]
    pub resize: bool,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct ClassifyArgs {
    #[arg(long)]
    pub checkpoint: std::path::PathBuf,
    /// A video file (decoded with ffmpeg) or a directory of frame images.
    #[arg(long)]
    pub video_frames: std::path::PathBuf,
    #[arg(long, default_value_t = 200)]
    pub frames: usize,
    #[arg(long, default_value = "majority")]
    pub voting: String,
    #[arg(long)]
    pub allow_repeats: bool,
    #[arg(long)]
    pub resize: bool,
    /// Keep the sampled frames here instead of a temporary directory.
    #[arg(long)]
    #[serde(skip)]
    pub work_dir: Option<std::path::PathBuf>,
    #[arg(long, default_value = "ffmpeg")]
    pub ffmpeg: std::path::PathBuf,
    #[arg(long, default_value = "ffprobe")]
    pub ffprobe: std::path::PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    /// Videos per class.
    #[arg(long, default_value_t = 12)]
    pub videos: usize,
    /// Frames per video.
    #[arg(long, default_value_t = 9)]
    pub frames: usize,
    /// Pattern amplitude σ_n.
    #[arg(long, default_value_t = 0.02)]
    pub noise: f64,
    /// Scene amplitude σ_s.
    #[arg(long, default_value_t = 0.2)]
    pub scene: f64,
    #[arg(long, default_value_t = 2.0)]
    pub scene_blur: f64,
    #[arg(long, default_value_t = 64)]
    pub height: usize,
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    /// Multiply the pattern with the scene, as sensor noise does.
    #[arg(long)]
    pub multiplicative: bool,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long)]
    #[serde(skip)]
    pub out: std::path::PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Random shapes per layer type.
    #[arg(long, default_value_t = 3)]
    pub trials: usize,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();

    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            eprintln!("error: cannot set up {jobs} worker threads: {e}");
            return ExitCode::from(EXIT_USAGE);
        }
    }

    let det = cli.deterministic;
    let result = match cli.command {
        Command::SelectDevices(a) => commands::select_devices(&a, det),
        Command::Split(a) => commands::split(&a, det),
        Command::Sample(a) => commands::sample(&a, det),
        Command::Train(mut a) => {
            a.deterministic = det;
            commands::train(&a)
        }
        Command::Evaluate(a) => commands::evaluate(&a, det),
        Command::Classify(a) => commands::classify(&a),
        Command::Synth(a) => commands::synth(&a, det),
        Command::Gradcheck(a) => commands::gradcheck(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {failure}");
            ExitCode::from(failure.exit_code())
        }
    }
}
