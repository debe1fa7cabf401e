use std::fmt;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use vidcam::dataset::{
    build_split, scan_vision_layout, select_devices as apply_selection, validate_manifest, DeviceCatalog, Side,
    SplitConfig, SplitManifest, VideoCatalog, DEFAULT_EXCLUSIONS,
};
use vidcam::evaluator::{classify_video, emit_report, evaluate as evaluate_split, summary_lines, EvalOptions, VotingRule};
use vidcam::frames::{
    extract_frames, index_frames, write_frame_manifest, AutoDecoder, FfmpegDecoder, FrameRecord, Scenario,
    VideoDescriptor, Version, FRAME_MANIFEST,
};
use vidcam::gradcheck::run_gradcheck;
use vidcam::network::{build_model, load_rgb, ArchitectureSpec, ResizePolicy};
use vidcam::pipeline::training_frames;
use vidcam::synthetic::{generate, SyntheticSpec};
use vidcam::trainer::{load_checkpoint, Checkpoint, TrainConfig, Trainer};
use vidcam::{short_hash, Error};

use crate::{ClassifyArgs, EvaluateArgs, GradcheckArgs, SampleArgs, SelectArgs, SplitArgs, SynthArgs, TrainArgs};
use crate::{EXIT_DATA, EXIT_NUMERIC, EXIT_USAGE};

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => EXIT_USAGE,
            Failure::Data(_) => EXIT_DATA,
            Failure::Numeric(_) => EXIT_NUMERIC,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Numeric(m) => f.write_str(m),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_numeric() {
            Failure::Numeric(e.to_string())
        } else {
            Failure::Data(e.to_string())
        }
    }
}

type CmdResult = Result<(), Failure>;

/// The parsed invocation, echoed into every artifact. Output locations are
/// left out so that the same run written elsewhere gives the same bytes.
#[derive(Serialize)]
struct RunConfig<'a, A: Serialize> {
    tool: &'static str,
    version: &'static str,
    command: &'static str,
    deterministic: bool,
    seed: Option<u64>,
    config_hash: String,
    args: &'a A,
}

fn run_config<A: Serialize>(command: &'static str, args: &A, seed: Option<u64>, deterministic: bool) -> serde_json::Value {
    let hashed = serde_json::to_vec(&(command, args)).expect("arguments serialise");
    serde_json::to_value(RunConfig {
        tool: "vidcam",
        version: env!("CARGO_PKG_VERSION"),
        command,
        deterministic,
        seed,
        config_hash: short_hash(&hashed),
        args,
    })
    .expect("arguments serialise")
}

fn create_dir(path: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), Failure> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Failure::Data(e.to_string()))?;
    bytes.push(b'\n');
    std::fs::write(path, bytes).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn parse_voting(s: &str) -> Result<VotingRule, Failure> {
    s.parse().map_err(|e: Error| Failure::Usage(e.to_string()))
}

fn resize_policy(resize: bool) -> ResizePolicy {
    if resize {
        ResizePolicy::Resize
    } else {
        ResizePolicy::default()
    }
}

fn decoder(ffmpeg: &Path, ffprobe: &Path) -> AutoDecoder {
    AutoDecoder {
        ffmpeg: FfmpegDecoder {
            ffmpeg: ffmpeg.to_path_buf(),
            ffprobe: ffprobe.to_path_buf(),
        },
    }
}

#[derive(Serialize, serde::Deserialize)]
struct DevicesFile {
    run_config: serde_json::Value,
    #[serde(flatten)]
    devices: DeviceCatalog,
}

pub fn select_devices(a: &SelectArgs, deterministic: bool) -> CmdResult {
    let catalog = match (&a.catalog, &a.vision_root) {
        (Some(path), _) => VideoCatalog::read_csv(path)?,
        (None, Some(root)) => scan_vision_layout(root)?,
        (None, None) => return Err(Failure::Usage("either --catalog or --vision-root is required".into())),
    };
    create_dir(&a.out)?;
    if a.vision_root.is_some() {
        catalog.write_csv(&a.out.join("catalog.csv"))?;
    }
    let mut exclusions: Vec<String> = if a.no_default_exclusions {
        Vec::new()
    } else {
        DEFAULT_EXCLUSIONS.iter().map(|s| s.to_string()).collect()
    };
    exclusions.extend(a.exclude.iter().cloned());

    let report = apply_selection(&catalog, &exclusions);
    report.write_audit_csv(&a.out.join("device_audit.csv"))?;
    write_json(
        &a.out.join("devices.json"),
        &DevicesFile {
            run_config: run_config("select-devices", a, None, deterministic),
            devices: report.devices.clone(),
        },
    )?;
    for d in &report.audit {
        println!(
            "{:<12} {:<10} {:<24} natives {:>3} shared {:>3} {:<5} {}",
            d.device_id,
            d.brand,
            d.model,
            d.native_videos,
            d.shared_on_both,
            if d.kept { "keep" } else { "drop" },
            d.reason()
        );
    }
    println!("kept {} of {} devices", report.devices.len(), report.audit.len());
    Ok(())
}

fn read_devices(path: &Path) -> Result<DeviceCatalog, Failure> {
    let text = std::fs::read(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
    let file: DevicesFile =
        serde_json::from_slice(&text).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
    Ok(DeviceCatalog::new(file.devices.devices)?)
}

pub fn split(a: &SplitArgs, deterministic: bool) -> CmdResult {
    if let Some(path) = &a.audit {
        let manifest = SplitManifest::read(path)?;
        let report = validate_manifest(&manifest.rows);
        println!("audited {} rows over {} devices", report.rows, report.devices);
        report.into_result()?;
        println!("clean");
        return Ok(());
    }
    let (Some(catalog_path), Some(out)) = (&a.catalog, &a.out) else {
        return Err(Failure::Usage("--catalog and --out are required unless --audit is given".into()));
    };
    let catalog = VideoCatalog::read_csv(catalog_path)?;
    let devices = match &a.devices {
        Some(path) => read_devices(path)?,
        None => DeviceCatalog::new(catalog.devices())?,
    };
    let config = SplitConfig {
        train_fraction: a.train_fraction,
        seed: a.seed,
        max_retries: a.max_retries,
    };
    let mut manifest = build_split(&devices, &catalog, &config)?;
    validate_manifest(&manifest.rows).into_result()?;
    if let Some(meta) = &mut manifest.meta {
        meta.run_config = run_config("split", a, Some(a.seed), deterministic);
    }
    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    manifest.write(out)?;
    if let Some(meta) = &manifest.meta {
        println!(
            "min native {} -> {} train / {} test natives per device",
            meta.min_native, meta.native_train, meta.native_test
        );
        for d in &meta.devices {
            println!(
                "{:<12} label {:>2} videos {:>3} train / {:>3} test{}",
                d.device_id,
                d.label,
                d.videos_train,
                d.videos_test,
                if d.fallback { " (fallback assignment)" } else { "" }
            );
        }
    }
    println!(
        "{} train / {} test videos",
        manifest.side(Side::Train).count(),
        manifest.side(Side::Test).count()
    );
    Ok(())
}

pub fn sample(a: &SampleArgs, deterministic: bool) -> CmdResult {
    let catalog = VideoCatalog::read_csv(&a.videos)?;
    let wanted: Option<std::collections::BTreeSet<String>> = match &a.split {
        Some(path) => Some(SplitManifest::read(path)?.rows.into_iter().map(|r| r.video_id).collect()),
        None => None,
    };
    let videos: Vec<VideoDescriptor> = catalog
        .entries()
        .iter()
        .filter(|e| wanted.as_ref().is_none_or(|w| w.contains(&e.video_id)))
        .map(|e| e.descriptor())
        .collect();
    if videos.is_empty() {
        return Err(Failure::Data("no videos to sample".into()));
    }
    create_dir(&a.out)?;
    let decoder = decoder(&a.ffmpeg, &a.ffprobe);
    let per_video = videos
        .par_iter()
        .map(|v| {
            let set = extract_frames(v, a.frames, &a.out, &decoder, a.allow_repeats)?;
            log::info!("{}: {} frames", v.video_id, set.frames.len());
            Ok(FrameRecord::for_frames(v, &set))
        })
        .collect::<Result<Vec<_>, Error>>()?;
    let records: Vec<FrameRecord> = per_video.into_iter().flatten().collect();
    write_frame_manifest(&a.out.join(FRAME_MANIFEST), &records)?;
    write_json(&a.out.join("sample.json"), &run_config("sample", a, None, deterministic))?;
    println!("{} frames from {} videos", records.len(), videos.len());
    Ok(())
}

fn architecture(a: &TrainArgs, split: &SplitManifest, source_hint: Option<&Path>) -> Result<ArchitectureSpec, Failure> {
    let classes = split.classes().len();
    let mut arch = if let Some(path) = &a.config {
        ArchitectureSpec::load(path)?
    } else if a.reduced {
        let path = source_hint.ok_or_else(|| Failure::Data("no training frames".into()))?;
        let img = load_rgb(path)?;
        ArchitectureSpec::reduced(img.height() as usize, img.width() as usize, classes)
    } else {
        ArchitectureSpec::default()
    };
    if arch.num_classes != classes {
        log::info!("setting num_classes to {classes} to match the split (architecture said {})", arch.num_classes);
        arch.num_classes = classes;
    }
    if a.unconstrained {
        arch = arch.without_constraint();
    }
    arch.validate()?;
    Ok(arch)
}

pub fn train(a: &TrainArgs) -> CmdResult {
    let split = SplitManifest::read(&a.manifest)?;
    let frames = index_frames(&a.frames)?;
    let policy = resize_policy(a.resize);
    let defaults = TrainConfig::default();
    let config = TrainConfig {
        epochs: a.epochs.unwrap_or(defaults.epochs),
        batch_size: a.batch_size.unwrap_or(defaults.batch_size),
        lr0: a.lr.unwrap_or(defaults.lr0),
        momentum: a.momentum.unwrap_or(defaults.momentum),
        decay: a.decay.unwrap_or(defaults.decay),
        seed: a.seed,
        deterministic: a.deterministic,
        checkpoint_dir: Some(a.out.clone()),
    };
    config.validate()?;

    let first_frame = split
        .side(Side::Train)
        .find_map(|r| frames.get(&r.video_id).and_then(|f| f.first()).map(|f| f.1.clone()));
    let mut trainer = match &a.resume {
        Some(path) => {
            let ckpt: Checkpoint<f32> = load_checkpoint(path)?;
            log::info!("resuming from {} at epoch {}", path.display(), ckpt.epoch);
            Trainer::resume(ckpt, config)?
        }
        None => {
            let arch = architecture(a, &split, first_frame.as_deref())?;
            let model = build_model::<f32>(&arch, a.seed)?.with_classes(split.classes())?;
            Trainer::new(model, config)?
        }
    };
    let arch = trainer.model().spec().clone();
    let source = training_frames(&split.rows, &frames, &arch, policy)?;
    trainer.set_run_config(run_config("train", a, Some(a.seed), a.deterministic));

    let eval_options = EvalOptions {
        resize: policy,
        ..EvalOptions::default()
    };
    let outcome = trainer.train(&source, |model, _| {
        if a.eval_each_epoch {
            Ok(Some(evaluate_split(model, &split.rows, &frames, &eval_options)?.video_accuracy()))
        } else {
            Ok(None)
        }
    })?;
    write_json(&a.out.join("train.json"), &run_config("train", a, Some(a.seed), a.deterministic))?;
    for e in &outcome.epochs {
        println!("{}", e.line());
    }
    println!("{} checkpoints in {}", outcome.checkpoints.len(), a.out.display());
    Ok(())
}

pub fn evaluate(a: &EvaluateArgs, deterministic: bool) -> CmdResult {
    let voting = parse_voting(&a.voting)?;
    let ckpt: Checkpoint<f32> = load_checkpoint(&a.checkpoint)?;
    let split = SplitManifest::read(&a.manifest)?;
    let frames = index_frames(&a.frames)?;
    let options = EvalOptions {
        voting,
        allow_partial: a.allow_partial,
        resize: resize_policy(a.resize),
        batch_size: a.batch_size,
    };
    let mut report = evaluate_split(&ckpt.model, &split.rows, &frames, &options)?;
    report.meta = serde_json::json!({
        "run_config": run_config("evaluate", a, Some(ckpt.meta.seed), deterministic),
        "checkpoint": {
            "epoch": ckpt.epoch,
            "seed": ckpt.meta.seed,
            "config_hash": ckpt.meta.config_hash,
        },
    });
    emit_report(&report, &a.out)?;
    for line in summary_lines(&report) {
        println!("{line}");
    }
    Ok(())
}

pub fn classify(a: &ClassifyArgs) -> CmdResult {
    let voting = parse_voting(&a.voting)?;
    let ckpt: Checkpoint<f32> = load_checkpoint(&a.checkpoint)?;
    let temp;
    let work_dir: PathBuf = match &a.work_dir {
        Some(d) => d.clone(),
        None => {
            temp = tempfile::tempdir().map_err(|e| Failure::Data(format!("temporary directory: {e}")))?;
            temp.path().to_path_buf()
        }
    };
    let video_id = a
        .video_frames
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "video".into());
    let video = VideoDescriptor {
        video_id: video_id.clone(),
        path: a.video_frames.clone(),
        device_id: String::new(),
        scenario: Scenario::Flat,
        version: Version::Native,
        total_frames: None,
        fps: None,
        duration: None,
    };
    let set = extract_frames(&video, a.frames, &work_dir, &decoder(&a.ffmpeg, &a.ffprobe), a.allow_repeats)?;
    let options = EvalOptions {
        voting,
        resize: resize_policy(a.resize),
        ..EvalOptions::default()
    };
    let (_, vote) = classify_video(&ckpt.model, &set.frames, &options)?;
    let classes = ckpt.model.classes();
    let n = set.frames.len() as f64;
    println!("video {video_id}");
    println!(
        "predicted {} (label {}){}",
        classes[vote.label],
        vote.label,
        if vote.tie { " after tie-break" } else { "" }
    );
    println!("frames {} voting {voting}", set.frames.len());
    println!("{:<16} {:>6} {:>10}", "device", "votes", "mean-prob");
    for (c, name) in classes.iter().enumerate() {
        println!("{:<16} {:>6} {:>10.4}", name, vote.tally[c], vote.mass[c] / n);
    }
    Ok(())
}

pub fn synth(a: &SynthArgs, deterministic: bool) -> CmdResult {
    let spec = SyntheticSpec {
        num_classes: a.classes,
        height: a.height,
        width: a.width,
        noise: a.noise,
        scene: a.scene,
        scene_blur: a.scene_blur,
        videos_per_class: a.videos,
        frames_per_video: a.frames,
        seed: a.seed,
        multiplicative: a.multiplicative,
    };
    spec.validate()?;
    let summary = generate(&spec, &a.out)?;
    write_json(&a.out.join("run.json"), &run_config("synth", a, Some(a.seed), deterministic))?;
    println!(
        "{} videos, {} frames, clipped {:.5}, max pattern overlap {:.4}",
        summary.videos, summary.frames, summary.clip_fraction, summary.max_pattern_overlap
    );
    println!("catalog {}", a.out.join(&summary.catalog).display());
    println!("frames  {}", a.out.join(&summary.frames_dir).display());
    Ok(())
}

pub fn gradcheck(a: &GradcheckArgs) -> CmdResult {
    let report = run_gradcheck(a.seed, a.trials)?;
    for line in report.lines() {
        println!("{line}");
    }
    if report.passed() {
        println!("gradcheck passed (seed {})", a.seed);
        Ok(())
    } else {
        Err(Failure::Numeric(format!("gradient check failed (seed {})", a.seed)))
    }
}
