//! Mini-batch SGD with momentum and inverse-time learning-rate decay.
//!
//! After every optimizer step the constrained bank is projected back onto
//! its constraint set. One checkpoint is written per epoch.

mod checkpoint;
mod data;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, FORMAT_VERSION, MAGIC};
pub use data::{FileFrames, FrameSource, InMemoryFrames};

use crate::constrained::{ProjectionReport, CONSTRAINT_TOLERANCE};
use crate::network::{Gradients, Model};
use crate::tensor::{softmax_cross_entropy, Scalar, Tensor};
use crate::util::{create_dir_all, derive_seed, short_hash};
use crate::{Error, Result};

/// Steps between constraint audits in release builds; debug builds audit
/// every step.
const RELEASE_AUDIT_INTERVAL: u64 = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub momentum: f64,
    /// Per-batch decay of the inverse-time schedule `lr0 / (1 + decay·t)`.
    pub decay: f64,
    pub seed: u64,
    pub deterministic: bool,
    #[serde(skip)]
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 128,
            lr0: 0.001,
            momentum: 0.95,
            decay: 0.0005,
            seed: 0,
            deterministic: true,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(self.lr0.is_finite() && self.lr0 > 0.0) {
            return Err(Error::InvalidConfig(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if !(self.momentum.is_finite() && (0.0..1.0).contains(&self.momentum)) {
            return Err(Error::InvalidConfig(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.decay.is_finite() && self.decay >= 0.0) {
            return Err(Error::InvalidConfig(format!("decay must be non-negative, got {}", self.decay)));
        }
        Ok(())
    }

    /// Learning rate for batch counter `t`.
    pub fn learning_rate(&self, step: u64) -> f64 {
        self.lr0 / (1.0 + self.decay * step as f64)
    }
}

/// Hash of the training configuration and architecture.
pub fn config_hash(config: &TrainConfig, model_spec: &crate::network::ArchitectureSpec) -> String {
    let json = serde_json::to_vec(&(config, model_spec)).expect("config serialises");
    short_hash(&json)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T = f32> {
    /// One velocity per parameter, shaped like it.
    pub velocities: Vec<Tensor<T>>,
    /// Number of batches processed so far.
    pub step: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn for_model(model: &Model<T>) -> Self {
        OptimizerState {
            velocities: model.params().iter().map(|(_, p)| Tensor::zeros(p.shape().to_vec())).collect(),
            step: 0,
        }
    }
}

/// One step of `v ← momentum·v − lr_t·g; p ← p + v` with
/// `lr_t = lr0 / (1 + decay·t)`, then `t ← t + 1`. Returns `lr_t`.
///
/// Rejects non-finite gradients before touching any parameter.
pub fn sgd_momentum_step<T: Scalar>(
    params: &mut [(String, &mut Tensor<T>)],
    grads: &Gradients<T>,
    state: &mut OptimizerState<T>,
    config: &TrainConfig,
) -> Result<f64> {
    if params.len() != grads.tensors.len() || params.len() != state.velocities.len() {
        return Err(Error::shape(
            "sgd_momentum_step",
            "parameter count",
            params.len(),
            format!("{} grads, {} velocities", grads.tensors.len(), state.velocities.len()),
        ));
    }
    for ((name, p), (g, v)) in params.iter().zip(grads.tensors.iter().zip(&state.velocities)) {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(Error::shape(
                "sgd_momentum_step",
                name.clone(),
                format!("{:?}", p.shape()),
                format!("grad {:?}, velocity {:?}", g.shape(), v.shape()),
            ));
        }
        if !g.all_finite() {
            let layer = name.split('.').next().unwrap_or(name).to_string();
            return Err(Error::NonFiniteGradient {
                layer,
                param: name.clone(),
            });
        }
    }
    let lr = config.learning_rate(state.step);
    let lr_t = T::from_f64(lr);
    let momentum = T::from_f64(config.momentum);
    for ((_, p), (g, v)) in params.iter_mut().zip(grads.tensors.iter().zip(state.velocities.iter_mut())) {
        for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vv = momentum * *vv - lr_t * gv;
            *pv += *vv;
        }
    }
    state.step += 1;
    Ok(lr)
}

#[derive(Debug, Clone)]
pub struct StepStats {
    pub loss: f64,
    pub lr: f64,
    pub projection: Option<ProjectionReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
    pub elapsed_secs: f64,
    pub test_video_accuracy: Option<f64>,
}

impl EpochLog {
    /// One structured line for the training log.
    pub fn line(&self) -> String {
        let mut s = format!(
            "epoch={} loss={:.6} lr={:.8} elapsed={:.2}s",
            self.epoch, self.mean_loss, self.lr, self.elapsed_secs
        );
        if let Some(acc) = self.test_video_accuracy {
            s.push_str(&format!(" test_video_acc={acc:.4}"));
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub epochs: Vec<EpochLog>,
    /// One file per epoch, when a checkpoint directory was configured.
    pub checkpoints: Vec<PathBuf>,
}

/// Owns the model and optimizer state for a training run.
pub struct Trainer {
    model: Model<f32>,
    state: OptimizerState<f32>,
    config: TrainConfig,
    run_config: serde_json::Value,
    epochs_done: usize,
}

impl Trainer {
    pub fn new(model: Model<f32>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let state = OptimizerState::for_model(&model);
        Ok(Trainer {
            model,
            state,
            config,
            run_config: serde_json::Value::Null,
            epochs_done: 0,
        })
    }

    /// Resumes from a checkpoint.
    pub fn resume(ckpt: Checkpoint<f32>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Trainer {
            model: ckpt.model,
            state: ckpt.optimizer,
            config,
            run_config: ckpt.meta.run_config,
            epochs_done: ckpt.epoch,
        })
    }

    /// Invocation details echoed into every checkpoint.
    pub fn set_run_config(&mut self, run_config: serde_json::Value) {
        self.run_config = run_config;
    }

    pub fn model(&self) -> &Model<f32> {
        &self.model
    }

    pub fn into_model(self) -> Model<f32> {
        self.model
    }

    pub fn optimizer(&self) -> &OptimizerState<f32> {
        &self.state
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Forward, backward, optimizer step and constraint projection for one batch.
    pub fn train_batch(&mut self, inputs: &Tensor<f32>, labels: &[usize]) -> Result<StepStats> {
        let (logits, cache) = self.model.forward_train(inputs)?;
        let ce = softmax_cross_entropy(&logits, labels)?;
        if !ce.loss.is_finite() {
            return Err(Error::NonFinite(format!("loss is {} at step {}", ce.loss, self.state.step)));
        }
        let grads = self.model.backward(&cache, ce.grad_logits)?;
        let lr = {
            let mut params = self.model.params_mut();
            sgd_momentum_step(&mut params, &grads, &mut self.state, &self.config)?
        };
        let projection = self.model.enforce_constraints();
        if cfg!(debug_assertions) || self.state.step.is_multiple_of(RELEASE_AUDIT_INTERVAL) {
            if let Some(bank) = self.model.constrained_bank() {
                bank.check_constraints(CONSTRAINT_TOLERANCE)?;
            }
        }
        Ok(StepStats {
            loss: ce.loss as f64,
            lr,
            projection,
        })
    }

    /// Seeded permutation of the frame order for `epoch`.
    pub fn epoch_order(&self, len: usize, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..len).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, 0x5eed_0000 + epoch as u64));
        order.shuffle(&mut rng);
        order
    }

    /// One pass over `source`. Batches are decoded on a loader thread while
    /// the previous batch trains; order is fixed by the epoch permutation.
    pub fn run_epoch(&mut self, source: &dyn FrameSource, epoch: usize) -> Result<EpochLog> {
        let start = Instant::now();
        let order = self.epoch_order(source.len(), epoch);
        let batches: Vec<Vec<usize>> = order.chunks(self.config.batch_size).map(|c| c.to_vec()).collect();
        let mut total = 0.0;
        let mut seen = 0usize;
        let mut lr = self.config.learning_rate(self.state.step);

        std::thread::scope(|scope| -> Result<()> {
            let (tx, rx) = mpsc::sync_channel::<Result<(Tensor<f32>, Vec<usize>)>>(2);
            let batches = &batches;
            scope.spawn(move || {
                for idx in batches {
                    let loaded = idx
                        .par_iter()
                        .map(|&i| source.load(i))
                        .collect::<Result<Vec<_>>>()
                        .and_then(|frames| Tensor::stack(&frames))
                        .map(|t| (t, idx.iter().map(|&i| source.label(i)).collect()));
                    if tx.send(loaded).is_err() {
                        break;
                    }
                }
            });
            for received in rx {
                let (inputs, labels) = received?;
                let stats = self.train_batch(&inputs, &labels)?;
                total += stats.loss * labels.len() as f64;
                seen += labels.len();
                lr = stats.lr;
            }
            Ok(())
        })?;

        self.epochs_done = epoch;
        Ok(EpochLog {
            epoch,
            mean_loss: total / seen.max(1) as f64,
            lr,
            elapsed_secs: start.elapsed().as_secs_f64(),
            test_video_accuracy: None,
        })
    }

    pub fn checkpoint(&self, mean_loss: Option<f64>) -> Checkpoint<f32> {
        Checkpoint {
            model: self.model.clone(),
            optimizer: self.state.clone(),
            epoch: self.epochs_done,
            meta: CheckpointMeta {
                config_hash: config_hash(&self.config, self.model.spec()),
                seed: self.config.seed,
                train_config: self.config.clone(),
                run_config: self.run_config.clone(),
                mean_loss,
            },
        }
    }

    /// Runs all configured epochs. `on_epoch` may evaluate the model and
    /// return a test video accuracy for the log.
    pub fn train(
        &mut self,
        source: &dyn FrameSource,
        mut on_epoch: impl FnMut(&Model<f32>, usize) -> Result<Option<f64>>,
    ) -> Result<TrainOutcome> {
        let missing = source.missing();
        if !missing.is_empty() {
            return Err(Error::MissingFiles(missing));
        }
        if source.is_empty() {
            return Err(Error::Dataset("no training frames".into()));
        }
        if let Some(dir) = &self.config.checkpoint_dir {
            create_dir_all(dir)?;
        }
        let mut outcome = TrainOutcome {
            epochs: Vec::new(),
            checkpoints: Vec::new(),
        };
        let first = self.epochs_done + 1;
        for epoch in first..first + self.config.epochs {
            let mut log_entry = self.run_epoch(source, epoch)?;
            log_entry.test_video_accuracy = on_epoch(&self.model, epoch)?;
            log::info!("{}", log_entry.line());
            if let Some(dir) = self.config.checkpoint_dir.clone() {
                let path = dir.join(format!("epoch_{epoch:03}.ckpt"));
                save_checkpoint(&self.checkpoint(Some(log_entry.mean_loss)), &path)?;
                append_log(&dir.join("train.log"), &log_entry.line())?;
                outcome.checkpoints.push(path);
            }
            outcome.epochs.push(log_entry);
        }
        Ok(outcome)
    }
}

fn append_log(path: &Path, line: &str) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

/// Trains `model` on `source` for `config.epochs` epochs.
pub fn train(model: Model<f32>, source: &dyn FrameSource, config: TrainConfig) -> Result<(Model<f32>, TrainOutcome)> {
    let mut trainer = Trainer::new(model, config)?;
    let outcome = trainer.train(source, |_, _| Ok(None))?;
    Ok((trainer.into_model(), outcome))
}
