use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use vidcam::dataset::{mock_vision_catalog, CatalogEntry, SplitManifest, VideoCatalog};
use vidcam::frames::{read_frame_manifest, Scenario, Version};

fn vidcam(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vidcam"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(args: &[&str]) -> String {
    let o = vidcam(args);
    assert_eq!(o.status.code(), Some(0), "{args:?} failed:\n{}", stderr(&o));
    stdout(&o)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(vidcam(&["--no-such-flag"]).status.code(), Some(1));
    assert_eq!(vidcam(&[]).status.code(), Some(1));
    assert_eq!(vidcam(&["train", "--manifest", "x.csv"]).status.code(), Some(1));
    let o = vidcam(&["split", "--seed", "3"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Usage"));
}

#[test]
fn help_exits_with_zero() {
    let out = ok(&["--help"]);
    for sub in ["select-devices", "split", "sample", "train", "evaluate", "classify", "synth", "gradcheck"] {
        assert!(out.contains(sub), "help lists {sub}");
    }
}

#[test]
fn gradcheck_prints_every_layer() {
    let out = ok(&["gradcheck", "--seed", "3"]);
    for layer in ["conv2d.filters", "constrained.weights", "maxpool.input", "dense.weights", "activation.tanh"] {
        assert!(out.contains(layer), "missing {layer} in\n{out}");
    }
    assert!(out.contains("gradcheck passed"));
}

#[test]
fn missing_input_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = vidcam(&[
        "evaluate",
        "--checkpoint",
        s(&dir.path().join("none.ckpt")),
        "--manifest",
        s(&dir.path().join("none.csv")),
        "--frames",
        s(dir.path()),
        "--out",
        s(&dir.path().join("r")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error:"));
}

#[test]
fn vision_shaped_catalog_selects_and_splits() {
    let dir = tempfile::tempdir().unwrap();
    let catalog = dir.path().join("catalog.csv");
    mock_vision_catalog().write_csv(&catalog).unwrap();
    let sel = dir.path().join("sel");
    let out = ok(&["select-devices", "--catalog", s(&catalog), "--out", s(&sel)]);
    assert!(out.contains("kept 28 of 35 devices"), "{out}");
    assert!(sel.join("device_audit.csv").is_file());
    let devices = json(&sel.join("devices.json"));
    assert_eq!(devices["devices"].as_array().unwrap().len(), 28);
    assert_eq!(devices["run_config"]["command"], "select-devices");

    let split = dir.path().join("split.csv");
    let out = ok(&[
        "split",
        "--catalog",
        s(&catalog),
        "--devices",
        s(&sel.join("devices.json")),
        "--seed",
        "4",
        "--out",
        s(&split),
    ]);
    assert!(out.contains("min native 13 -> 7 train / 6 test"), "{out}");
    assert!(out.contains("588 train / 504 test videos"), "{out}");
    let meta = json(&split.with_extension("json"));
    assert_eq!(meta["seed"], 4);
    assert_eq!(meta["run_config"]["seed"], 4);
    assert!(meta["run_config"]["config_hash"].as_str().unwrap().len() == 16);
    assert!(ok(&["split", "--audit", s(&split)]).contains("clean"));

    // Same invocation, same bytes.
    let again = dir.path().join("again.csv");
    ok(&[
        "split",
        "--catalog",
        s(&catalog),
        "--devices",
        s(&sel.join("devices.json")),
        "--seed",
        "4",
        "--out",
        s(&again),
    ]);
    assert_eq!(fs::read(&split).unwrap(), fs::read(&again).unwrap());
    assert_eq!(fs::read(split.with_extension("json")).unwrap(), fs::read(again.with_extension("json")).unwrap());
}

#[test]
fn tampered_split_fails_the_audit() {
    let dir = tempfile::tempdir().unwrap();
    let catalog = dir.path().join("catalog.csv");
    mock_vision_catalog().write_csv(&catalog).unwrap();
    let split = dir.path().join("split.csv");
    ok(&["split", "--catalog", s(&catalog), "--out", s(&split), "--seed", "1"]);

    let mut manifest = SplitManifest::read(&split).unwrap();
    let row = manifest
        .rows
        .iter_mut()
        .find(|r| r.version == Version::Whatsapp)
        .unwrap();
    row.side = match row.side {
        vidcam::dataset::Side::Train => vidcam::dataset::Side::Test,
        vidcam::dataset::Side::Test => vidcam::dataset::Side::Train,
    };
    manifest.meta = None;
    let tampered = dir.path().join("tampered.csv");
    manifest.write(&tampered).unwrap();
    let o = vidcam(&["split", "--audit", s(&tampered)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Pairing"), "{}", stderr(&o));
}

/// Catalog whose videos are directories of frames copied from a synthetic
/// dataset: 2 devices × 3 scenarios, 9 frames each.
fn frame_dir_catalog(root: &Path) -> PathBuf {
    let synth = root.join("synth");
    ok(&["synth", "--classes", "2", "--videos", "3", "--frames", "9", "--out", s(&synth)]);
    let synth_catalog = VideoCatalog::read_csv(&synth.join("catalog.csv")).unwrap();
    let mut entries = Vec::new();
    for e in synth_catalog.entries() {
        let video_dir = root.join("videos").join(&e.video_id);
        fs::create_dir_all(&video_dir).unwrap();
        for k in 1..=9 {
            let name = format!("{}_f{k}.png", e.video_id);
            fs::copy(synth.join("frames").join(&name), video_dir.join(format!("{k:03}.png"))).unwrap();
        }
        entries.push(CatalogEntry {
            path: video_dir,
            frames: None,
            ..e.clone()
        });
    }
    let path = root.join("videos.csv");
    VideoCatalog::new(entries).unwrap().write_csv(&path).unwrap();
    path
}

#[test]
fn sample_extracts_equally_spaced_frames_from_frame_directories() {
    let dir = tempfile::tempdir().unwrap();
    let catalog = frame_dir_catalog(dir.path());
    let out = dir.path().join("sampled");
    let text = ok(&["sample", "--videos", s(&catalog), "--frames", "3", "--out", s(&out)]);
    assert!(text.contains("18 frames from 6 videos"), "{text}");
    let records = read_frame_manifest(&out.join("frames.csv")).unwrap();
    assert_eq!(records.len(), 18);
    let first: Vec<usize> = records.iter().take(3).map(|r| r.frame_index).collect();
    assert_eq!(first, vec![3, 6, 9]);
    assert!(records.iter().all(|r| r.path.is_file()));
    assert!(records.iter().any(|r| r.scenario == Scenario::Outdoor));
    assert_eq!(json(&out.join("sample.json"))["command"], "sample");

    let o = vidcam(&["sample", "--videos", s(&catalog), "--frames", "12", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--allow-repeats"));
    ok(&["sample", "--videos", s(&catalog), "--frames", "12", "--allow-repeats", "--out", s(&dir.path().join("rep"))]);
}

fn train_args<'a>(split: &'a str, frames: &'a str, out: &'a str) -> Vec<&'a str> {
    vec![
        "--deterministic",
        "train",
        "--reduced",
        "--manifest",
        split,
        "--frames",
        frames,
        "--out",
        out,
        "--epochs",
        "2",
        "--batch-size",
        "8",
        "--lr",
        "0.005",
        "--momentum",
        "0.9",
        "--seed",
        "5",
    ]
}

#[test]
fn synthetic_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let synth = root.join("synth");
    let text = ok(&["synth", "--classes", "3", "--videos", "6", "--frames", "4", "--seed", "2", "--out", s(&synth)]);
    assert!(text.contains("18 videos, 72 frames"), "{text}");
    assert_eq!(json(&synth.join("run.json"))["seed"], 2);

    let split = root.join("split.csv");
    ok(&["split", "--catalog", s(&synth.join("catalog.csv")), "--seed", "2", "--out", s(&split)]);
    let frames = synth.join("frames");

    let (a, b) = (root.join("run_a"), root.join("run_b"));
    let text = ok(&train_args(s(&split), s(&frames), s(&a)));
    assert!(text.contains("epoch=2"), "{text}");
    ok(&train_args(s(&split), s(&frames), s(&b)));
    for name in ["epoch_001.ckpt", "epoch_002.ckpt"] {
        let bytes = fs::read(a.join(name)).unwrap();
        assert_eq!(bytes, fs::read(b.join(name)).unwrap(), "{name} differs between runs");
    }
    let ckpt: vidcam::trainer::Checkpoint<f32> = vidcam::trainer::load_checkpoint(&a.join("epoch_002.ckpt")).unwrap();
    assert_eq!(ckpt.meta.seed, 5);
    assert_eq!(ckpt.meta.run_config["command"], "train");
    assert_eq!(ckpt.meta.run_config["deterministic"], true);
    assert!(ckpt.meta.run_config["config_hash"].is_string());
    assert_eq!(ckpt.model.classes(), ["S00", "S01", "S02"]);

    let (ra, rb) = (root.join("report_a"), root.join("report_b"));
    for out in [&ra, &rb] {
        let text = ok(&[
            "evaluate",
            "--checkpoint",
            s(&a.join("epoch_002.ckpt")),
            "--manifest",
            s(&split),
            "--frames",
            s(&frames),
            "--out",
            s(out),
        ]);
        assert!(text.contains("overall"), "{text}");
    }
    for name in ["report.json", "verdicts.csv", "confusion_overall.csv", "confusion_overall.pgm"] {
        assert_eq!(fs::read(ra.join(name)).unwrap(), fs::read(rb.join(name)).unwrap(), "{name}");
    }
    let report = json(&ra.join("report.json"));
    assert_eq!(report["meta"]["checkpoint"]["seed"], 5);
    assert!(report["meta"]["run_config"]["config_hash"].is_string());

    let text = ok(&[
        "evaluate",
        "--checkpoint",
        s(&a.join("epoch_002.ckpt")),
        "--manifest",
        s(&split),
        "--frames",
        s(&frames),
        "--out",
        s(&root.join("avg")),
        "--voting",
        "avgprob",
    ]);
    assert!(text.contains("voting avgprob"));
    let o = vidcam(&[
        "evaluate",
        "--checkpoint",
        s(&a.join("epoch_002.ckpt")),
        "--manifest",
        s(&split),
        "--frames",
        s(&frames),
        "--out",
        s(&root.join("bad")),
        "--voting",
        "plurality",
    ]);
    assert_eq!(o.status.code(), Some(1));

    // Classify one video from a directory of its frames.
    let video = root.join("one");
    fs::create_dir_all(&video).unwrap();
    for k in 1..=4 {
        let name = format!("S01_V_indoor_0002_f{k}.png");
        fs::copy(frames.join(&name), video.join(&name)).unwrap();
    }
    let text = ok(&[
        "classify",
        "--checkpoint",
        s(&a.join("epoch_002.ckpt")),
        "--video-frames",
        s(&video),
        "--frames",
        "4",
    ]);
    assert!(text.contains("predicted S0"), "{text}");
    assert!(text.contains("frames 4"));
    for dev in ["S00", "S01", "S02"] {
        assert!(text.contains(dev));
    }
}

#[test]
fn training_reports_missing_frames_up_front() {
    let dir = tempfile::tempdir().unwrap();
    let synth = dir.path().join("synth");
    ok(&["synth", "--classes", "2", "--videos", "6", "--frames", "2", "--out", s(&synth)]);
    let split = dir.path().join("split.csv");
    ok(&["split", "--catalog", s(&synth.join("catalog.csv")), "--out", s(&split)]);
    let frames = synth.join("frames");
    fs::remove_file(frames.join("S00_V_flat_0001_f2.png")).unwrap();
    fs::remove_file(frames.join("S01_V_flat_0001_f2.png")).unwrap();
    let ckpt = dir.path().join("ckpt");
    let o = vidcam(&train_args(s(&split), s(&frames), s(&ckpt)));
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("missing file"), "{}", stderr(&o));
    assert!(!ckpt.join("epoch_001.ckpt").exists());
}
