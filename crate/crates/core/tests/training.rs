use std::path::Path;
use std::process::{Command, Stdio};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vidcam::network::{build_model, ArchitectureSpec};
use vidcam::pipeline::{run_synthetic_experiment, ExperimentConfig};
use vidcam::synthetic::SyntheticSpec;
use vidcam::tensor::Tensor;
use vidcam::trainer::{load_checkpoint, train, InMemoryFrames, TrainConfig, Trainer};

fn synth(noise: f64, seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        noise,
        seed,
        ..SyntheticSpec::default()
    }
}

#[test]
fn synthetic_training_lowers_the_loss() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run_synthetic_experiment(&ExperimentConfig::reduced(synth(0.02, 5), 5, 5), tmp.path()).unwrap();
    let first = out.epochs.first().unwrap().mean_loss;
    let last = out.epochs.last().unwrap().mean_loss;
    assert!(last < first, "loss went from {first} to {last}");
    assert_eq!(out.checkpoints.len(), 5);
}

#[test]
fn without_a_pattern_frames_are_classified_at_chance() {
    let mut total = 0.0;
    let seeds = [21, 22, 23];
    for seed in seeds {
        let tmp = tempfile::tempdir().unwrap();
        let out = run_synthetic_experiment(&ExperimentConfig::reduced(synth(0.0, seed), 4, seed), tmp.path()).unwrap();
        total += out.report.frame_accuracy;
    }
    let mean = total / seeds.len() as f64;
    assert!((mean - 0.25).abs() <= 0.1, "mean frame accuracy {mean}");
}

#[test]
fn two_samples_are_memorized() {
    let arch = ArchitectureSpec::reduced(32, 32, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let frames: Vec<Tensor<f32>> = (0..2)
        .map(|_| Tensor::new([3, 32, 32], (0..3 * 32 * 32).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap())
        .collect();
    let batch = Tensor::stack(&frames).unwrap();
    let config = TrainConfig {
        epochs: 1,
        batch_size: 2,
        lr0: 0.01,
        momentum: 0.9,
        decay: 0.0,
        seed: 3,
        deterministic: true,
        checkpoint_dir: None,
    };
    let mut trainer = Trainer::new(build_model(&arch, 3).unwrap(), config).unwrap();
    let mut loss = f64::INFINITY;
    for _ in 0..500 {
        loss = trainer.train_batch(&batch, &[0, 1]).unwrap().loss;
        if loss < 1e-3 {
            break;
        }
    }
    assert!(loss < 1e-3, "loss {loss} after 500 steps");
}

fn small_run(dir: &Path) -> Vec<std::path::PathBuf> {
    let arch = ArchitectureSpec::reduced(32, 32, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut source = InMemoryFrames::default();
    for i in 0..12 {
        let data = (0..3 * 32 * 32).map(|_| rng.gen_range(0.0..1.0)).collect();
        source.push(Tensor::new([3, 32, 32], data).unwrap(), i % 3);
    }
    let config = TrainConfig {
        epochs: 2,
        batch_size: 4,
        lr0: 0.005,
        momentum: 0.9,
        decay: 0.0005,
        seed: 9,
        deterministic: true,
        checkpoint_dir: Some(dir.to_path_buf()),
    };
    train(build_model(&arch, 9).unwrap(), &source, config).unwrap().1.checkpoints
}

#[test]
fn repeated_runs_write_identical_checkpoints() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let first = small_run(a.path());
    let second = small_run(b.path());
    assert_eq!(first.len(), 2);
    for (x, y) in first.iter().zip(&second) {
        assert_eq!(x.file_name(), y.file_name());
        assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap());
    }
}

const CHILD_CKPT: &str = "VIDCAM_TEST_CHILD_CKPT";
const CHILD_OUT: &str = "VIDCAM_TEST_CHILD_OUT";

fn probe_logits(ckpt: &Path) -> Vec<u32> {
    let model = load_checkpoint::<f32>(ckpt).unwrap().model;
    let data = (0..2 * 3 * 32 * 32).map(|i| ((i * 37) % 101) as f32 / 100.0).collect();
    let input = Tensor::new([2, 3, 32, 32], data).unwrap();
    model.logits(&input).unwrap().data().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn loaded_checkpoint_gives_identical_logits_in_another_process() {
    if let (Some(ckpt), Some(out)) = (std::env::var_os(CHILD_CKPT), std::env::var_os(CHILD_OUT)) {
        let bits = probe_logits(Path::new(&ckpt));
        std::fs::write(out, serde_json::to_vec(&bits).unwrap()).unwrap();
        return;
    }
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = small_run(tmp.path()).pop().unwrap();
    let out = tmp.path().join("child.json");
    let status = Command::new(std::env::current_exe().unwrap())
        .args(["--exact", "loaded_checkpoint_gives_identical_logits_in_another_process", "--test-threads=1"])
        .env(CHILD_CKPT, &ckpt)
        .env(CHILD_OUT, &out)
        .stdout(Stdio::null())
        .status()
        .unwrap();
    assert!(status.success());
    let child: Vec<u32> = serde_json::from_slice(&std::fs::read(&out).unwrap()).unwrap();
    assert_eq!(child, probe_logits(&ckpt));
}
