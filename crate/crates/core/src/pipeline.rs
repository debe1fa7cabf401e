//! Wiring between split manifests, frame directories, training and
//! evaluation, plus the synthetic experiment used to check the whole chain.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{build_split, DeviceCatalog, Side, SplitConfig, SplitManifest, SplitRow, VideoCatalog};
use crate::evaluator::{emit_report, evaluate, EvalOptions, EvaluationReport};
use crate::frames::{index_frames, FrameIndex};
use crate::network::{build_model, ArchitectureSpec, Model, ResizePolicy};
use crate::synthetic::{generate, SyntheticSpec, SyntheticSummary};
use crate::trainer::{EpochLog, FileFrames, TrainConfig, Trainer};
use crate::{Error, Result};

/// Frames of the training side of a split, labelled by device.
///
/// Videos without any indexed frame are reported together as missing files.
pub fn training_frames(
    rows: &[SplitRow],
    frames: &FrameIndex,
    spec: &ArchitectureSpec,
    policy: ResizePolicy,
) -> Result<FileFrames> {
    let mut entries = Vec::new();
    let mut missing = Vec::new();
    for row in rows.iter().filter(|r| r.side == Side::Train) {
        match frames.get(&row.video_id) {
            Some(list) if !list.is_empty() => entries.extend(list.iter().map(|(_, p)| (p.clone(), row.label))),
            _ => missing.push(PathBuf::from(format!("{}_f*.png", row.video_id))),
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingFiles(missing));
    }
    let [_, h, w] = spec.input_shape;
    Ok(FileFrames::new(entries, h, w, policy))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub synth: SyntheticSpec,
    pub arch: ArchitectureSpec,
    pub train: TrainConfig,
    pub split_seed: u64,
}

impl ExperimentConfig {
    /// Reduced network sized for the synthetic frames, trained for
    /// `epochs` epochs in batches of 8.
    pub fn reduced(synth: SyntheticSpec, epochs: usize, seed: u64) -> Self {
        let arch = ArchitectureSpec::reduced(synth.height, synth.width, synth.num_classes);
        let train = TrainConfig {
            epochs,
            batch_size: 8,
            lr0: 0.005,
            momentum: 0.9,
            decay: 0.0005,
            seed,
            deterministic: true,
            checkpoint_dir: None,
        };
        ExperimentConfig {
            synth,
            arch,
            train,
            split_seed: seed,
        }
    }

    pub fn without_constraint(mut self) -> Self {
        self.arch = self.arch.without_constraint();
        self
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub summary: SyntheticSummary,
    pub split: SplitManifest,
    pub epochs: Vec<EpochLog>,
    pub checkpoints: Vec<PathBuf>,
    pub report: EvaluationReport,
    pub model: Model<f32>,
}

/// Generates the synthetic data under `out_dir/data`, splits it, trains
/// with one checkpoint per epoch under `out_dir/checkpoints` and writes the
/// evaluation of the last epoch to `out_dir/report`.
pub fn run_synthetic_experiment(config: &ExperimentConfig, out_dir: &Path) -> Result<ExperimentOutcome> {
    let data_dir = out_dir.join("data");
    let summary = generate(&config.synth, &data_dir)?;
    let catalog = VideoCatalog::read_csv(&data_dir.join(&summary.catalog))?;
    let devices = DeviceCatalog::new(catalog.devices())?;
    let split_config = SplitConfig {
        seed: config.split_seed,
        ..SplitConfig::default()
    };
    let split = build_split(&devices, &catalog, &split_config)?;
    split.write(&out_dir.join("split.csv"))?;
    let frames = index_frames(&data_dir.join(&summary.frames_dir))?;

    let model = build_model::<f32>(&config.arch, config.train.seed)?.with_classes(split.classes())?;
    let source = training_frames(&split.rows, &frames, &config.arch, ResizePolicy::default())?;
    let train_config = TrainConfig {
        checkpoint_dir: Some(out_dir.join("checkpoints")),
        ..config.train.clone()
    };
    let mut trainer = Trainer::new(model, train_config)?;
    trainer.set_run_config(serde_json::to_value(config)?);
    let outcome = trainer.train(&source, |_, _| Ok(None))?;
    let model = trainer.into_model();

    let mut report = evaluate(&model, &split.rows, &frames, &EvalOptions::default())?;
    report.meta = serde_json::json!({ "experiment": config });
    emit_report(&report, &out_dir.join("report"))?;
    Ok(ExperimentOutcome {
        summary,
        split,
        epochs: outcome.epochs,
        checkpoints: outcome.checkpoints,
        report,
        model,
    })
}
