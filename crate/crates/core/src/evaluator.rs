//! Frame classification, per-video voting and evaluation reports.
//!
//! Each test frame gets a probability vector `z_k` and a label
//! `ŷ_k = argmax z_k`; a video's label is the most frequent `ŷ_k`. Ties in
//! the vote go to the label with the larger summed probability over the
//! video, then to the lower label index, and are flagged.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Side, SplitRow};
use crate::frames::{FrameIndex, Scenario, Version};
use crate::network::{load_frame, Model, ResizePolicy};
use crate::tensor::Tensor;
use crate::util::{create_dir_all, write_file};
use crate::{Error, Result};

/// Tolerance on the unit sum of a probability vector.
pub const PROBABILITY_TOLERANCE: f64 = 1e-6;

/// Per-device probabilities for one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityVector(pub Vec<f32>);

impl ProbabilityVector {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.is_empty() || values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidArgument("probabilities must be finite and non-negative".into()));
        }
        let sum: f64 = values.iter().map(|&v| v as f64).sum();
        if (sum - 1.0).abs() > PROBABILITY_TOLERANCE * values.len().max(10) as f64 {
            return Err(Error::InvalidArgument(format!("probabilities sum to {sum}")));
        }
        Ok(ProbabilityVector(values))
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    /// Index of the largest entry; the lowest index wins a tie.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

fn argmax<T: PartialOrd + Copy>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FramePrediction {
    pub label: usize,
    pub probs: ProbabilityVector,
}

impl FramePrediction {
    pub fn from_probs(probs: ProbabilityVector) -> Self {
        FramePrediction {
            label: probs.argmax(),
            probs,
        }
    }
}

/// Classifies one preprocessed frame `[C, H, W]`.
pub fn predict_frame(model: &Model<f32>, frame: &Tensor<f32>) -> Result<FramePrediction> {
    let batch = Tensor::stack(std::slice::from_ref(frame))?;
    Ok(predict_batch(model, &batch)?.remove(0))
}

/// Classifies every frame of a batch `[N, C, H, W]`.
pub fn predict_batch(model: &Model<f32>, batch: &Tensor<f32>) -> Result<Vec<FramePrediction>> {
    let probs = model.predict(batch)?;
    probs
        .data()
        .chunks(model.num_classes())
        .map(|row| Ok(FramePrediction::from_probs(ProbabilityVector::new(row.to_vec())?)))
        .collect()
}

/// How frame predictions are turned into a video label.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase", tag = "rule", content = "threshold")]
pub enum VotingRule {
    /// Most frequent frame label.
    #[default]
    Majority,
    /// Experimental: argmax of the averaged probability vectors.
    AvgProb,
    /// Experimental: majority over frames whose top probability reaches the
    /// threshold; falls back to `AvgProb` when no frame qualifies.
    Threshold(f64),
}

impl fmt::Display for VotingRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VotingRule::Majority => f.write_str("majority"),
            VotingRule::AvgProb => f.write_str("avgprob"),
            VotingRule::Threshold(p) => write!(f, "threshold:{p}"),
        }
    }
}

impl FromStr for VotingRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "majority" => Ok(VotingRule::Majority),
            "avgprob" => Ok(VotingRule::AvgProb),
            _ => {
                let p = s
                    .strip_prefix("threshold:")
                    .and_then(|p| p.parse::<f64>().ok())
                    .ok_or_else(|| Error::InvalidArgument(format!("unknown voting rule `{s}` (majority|avgprob|threshold:<p>)")))?;
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::InvalidArgument(format!("threshold {p} not in [0, 1]")));
                }
                Ok(VotingRule::Threshold(p))
            }
        }
    }
}

/// Outcome of voting over one video's frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vote {
    pub label: usize,
    /// Votes per label; sums to the number of voting frames.
    pub tally: Vec<usize>,
    /// Summed probability per label over all frames.
    pub mass: Vec<f64>,
    pub tie: bool,
}

fn summed_mass(predictions: &[FramePrediction], classes: usize) -> Result<Vec<f64>> {
    let mut mass = vec![0.0; classes];
    for p in predictions {
        if p.probs.values().len() != classes {
            return Err(Error::shape("vote", "classes", classes, p.probs.values().len()));
        }
        for (m, &v) in mass.iter_mut().zip(p.probs.values()) {
            *m += v as f64;
        }
    }
    Ok(mass)
}

fn vote_over(labels: impl Iterator<Item = usize>, mass: Vec<f64>) -> Vote {
    let mut tally = vec![0usize; mass.len()];
    for l in labels {
        tally[l] += 1;
    }
    let top = tally.iter().copied().max().unwrap_or(0);
    let tied: Vec<usize> = (0..tally.len()).filter(|&c| tally[c] == top).collect();
    // Strict comparison keeps the lowest index among equal masses.
    let mut label = tied[0];
    for &c in &tied[1..] {
        if mass[c] > mass[label] {
            label = c;
        }
    }
    Vote {
        label,
        tally,
        mass,
        tie: tied.len() > 1,
    }
}

/// Majority vote over frame labels.
pub fn majority_vote(predictions: &[FramePrediction]) -> Result<Vote> {
    let first = predictions
        .first()
        .ok_or_else(|| Error::InvalidArgument("cannot vote over zero frames".into()))?;
    let mass = summed_mass(predictions, first.probs.values().len())?;
    Ok(vote_over(predictions.iter().map(|p| p.label), mass))
}

/// Applies `rule`; for `Majority` this is [`majority_vote`].
pub fn apply_vote(rule: VotingRule, predictions: &[FramePrediction]) -> Result<Vote> {
    let majority = majority_vote(predictions)?;
    match rule {
        VotingRule::Majority => Ok(majority),
        VotingRule::AvgProb => Ok(avg_prob_vote(majority)),
        VotingRule::Threshold(p) => {
            let confident: Vec<usize> = predictions
                .iter()
                .filter(|f| f.probs.values()[f.label] as f64 >= p)
                .map(|f| f.label)
                .collect();
            if confident.is_empty() {
                return Ok(avg_prob_vote(majority));
            }
            Ok(vote_over(confident.into_iter(), majority.mass))
        }
    }
}

fn avg_prob_vote(majority: Vote) -> Vote {
    let label = argmax(&majority.mass);
    let tie = majority.mass.iter().filter(|&&m| m == majority.mass[label]).count() > 1;
    Vote { label, tie, ..majority }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoVerdict {
    pub video_id: String,
    pub device_id: String,
    pub true_label: usize,
    pub scenario: Scenario,
    pub version: Version,
    pub frame_indices: Vec<usize>,
    pub frame_labels: Vec<usize>,
    pub frame_probs: Vec<ProbabilityVector>,
    pub tally: Vec<usize>,
    pub predicted: usize,
    pub tie: bool,
}

impl VideoVerdict {
    pub fn correct(&self) -> bool {
        self.predicted == self.true_label
    }
}

/// Accuracy and confusion matrix of one subset of test videos.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceResult {
    pub name: String,
    pub videos: usize,
    pub correct: usize,
    /// `None` when the slice holds no video.
    pub accuracy: Option<f64>,
    /// Video counts, rows indexed by true label.
    pub counts: Vec<Vec<usize>>,
    /// `counts` with every non-empty row divided by its sum; rows without
    /// videos stay zero.
    pub confusion: Vec<Vec<f64>>,
}

impl SliceResult {
    fn from_verdicts<'a>(name: &str, classes: usize, verdicts: impl Iterator<Item = &'a VideoVerdict>) -> Self {
        let mut counts = vec![vec![0usize; classes]; classes];
        for v in verdicts {
            counts[v.true_label][v.predicted] += 1;
        }
        let videos: usize = counts.iter().flatten().sum();
        let correct: usize = (0..classes).map(|c| counts[c][c]).sum();
        let confusion = counts
            .iter()
            .map(|row| {
                let total: usize = row.iter().sum();
                row.iter()
                    .map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 })
                    .collect()
            })
            .collect();
        SliceResult {
            name: name.to_string(),
            videos,
            correct,
            accuracy: (videos > 0).then(|| correct as f64 / videos as f64),
            counts,
            confusion,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub voting: VotingRule,
    pub classes: Vec<String>,
    pub frames_evaluated: usize,
    pub frame_accuracy: f64,
    /// `overall`, the three scenarios, the three versions, then
    /// `flat-<version>` for each version.
    pub slices: Vec<SliceResult>,
    pub verdicts: Vec<VideoVerdict>,
    /// Echo of the configuration that produced the report.
    #[serde(default)]
    pub meta: serde_json::Value,
}

impl EvaluationReport {
    /// Builds the report from verdicts.
    pub fn from_verdicts(voting: VotingRule, classes: Vec<String>, verdicts: Vec<VideoVerdict>) -> Self {
        let n = classes.len();
        let mut slices = vec![SliceResult::from_verdicts("overall", n, verdicts.iter())];
        for s in Scenario::ALL {
            slices.push(SliceResult::from_verdicts(s.as_str(), n, verdicts.iter().filter(|v| v.scenario == s)));
        }
        for ver in Version::ALL {
            slices.push(SliceResult::from_verdicts(ver.as_str(), n, verdicts.iter().filter(|v| v.version == ver)));
        }
        for ver in Version::ALL {
            let name = format!("flat-{ver}");
            let subset = verdicts.iter().filter(|v| v.scenario == Scenario::Flat && v.version == ver);
            slices.push(SliceResult::from_verdicts(&name, n, subset));
        }
        let frames: usize = verdicts.iter().map(|v| v.frame_labels.len()).sum();
        let frame_correct: usize = verdicts
            .iter()
            .map(|v| v.frame_labels.iter().filter(|&&l| l == v.true_label).count())
            .sum();
        EvaluationReport {
            voting,
            classes,
            frames_evaluated: frames,
            frame_accuracy: if frames == 0 { 0.0 } else { frame_correct as f64 / frames as f64 },
            slices,
            verdicts,
            meta: serde_json::Value::Null,
        }
    }

    pub fn slice(&self, name: &str) -> Option<&SliceResult> {
        self.slices.iter().find(|s| s.name == name)
    }

    pub fn overall(&self) -> &SliceResult {
        self.slice("overall").expect("overall slice always present")
    }

    pub fn video_accuracy(&self) -> f64 {
        self.overall().accuracy.unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub voting: VotingRule,
    /// Skip videos with missing frames instead of failing.
    pub allow_partial: bool,
    pub resize: ResizePolicy,
    /// Frames classified per forward pass.
    pub batch_size: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            voting: VotingRule::Majority,
            allow_partial: false,
            resize: ResizePolicy::default(),
            batch_size: 32,
        }
    }
}

/// Classifies the frames of one video and votes.
pub fn classify_video(
    model: &Model<f32>,
    frames: &[(usize, PathBuf)],
    options: &EvalOptions,
) -> Result<(Vec<FramePrediction>, Vote)> {
    let [_, h, w] = model.spec().input_shape;
    let mut predictions = Vec::with_capacity(frames.len());
    for chunk in frames.chunks(options.batch_size.max(1)) {
        let tensors = chunk
            .par_iter()
            .map(|(_, path)| load_frame(path, h, w, options.resize))
            .collect::<Result<Vec<_>>>()?;
        predictions.extend(predict_batch(model, &Tensor::stack(&tensors)?)?);
    }
    let vote = apply_vote(options.voting, &predictions)?;
    Ok((predictions, vote))
}

fn label_mapping(model: &Model<f32>, rows: &[&SplitRow]) -> Result<Vec<usize>> {
    let classes = model.classes();
    let by_name = rows.iter().all(|r| classes.contains(&r.device_id));
    rows.iter()
        .map(|r| {
            if by_name {
                Ok(classes.iter().position(|c| *c == r.device_id).expect("checked above"))
            } else if r.label < classes.len() {
                Ok(r.label)
            } else {
                Err(Error::Dataset(format!(
                    "video {} has label {} but the model knows {} classes",
                    r.video_id,
                    r.label,
                    classes.len()
                )))
            }
        })
        .collect()
}

/// Evaluates the test side of a split.
///
/// Every test video needs at least one frame in `frames`, and every listed
/// frame must exist; otherwise the missing files are reported and nothing is
/// evaluated unless `allow_partial` is set.
pub fn evaluate(model: &Model<f32>, rows: &[SplitRow], frames: &FrameIndex, options: &EvalOptions) -> Result<EvaluationReport> {
    let test: Vec<&SplitRow> = rows.iter().filter(|r| r.side == Side::Test).collect();
    if test.is_empty() {
        return Err(Error::Dataset("split has no test videos".into()));
    }
    let labels = label_mapping(model, &test)?;

    let mut jobs = Vec::new();
    let mut missing = Vec::new();
    for (row, label) in test.iter().zip(labels) {
        let video_frames = frames.get(&row.video_id).cloned().unwrap_or_default();
        let absent: Vec<PathBuf> = if video_frames.is_empty() {
            vec![PathBuf::from(format!("{}_f*.png", row.video_id))]
        } else {
            video_frames.iter().filter(|(_, p)| !p.is_file()).map(|(_, p)| p.clone()).collect()
        };
        if absent.is_empty() {
            jobs.push((*row, label, video_frames));
        } else {
            missing.extend(absent);
        }
    }
    if !missing.is_empty() {
        if !options.allow_partial {
            return Err(Error::MissingFiles(missing));
        }
        log::warn!("{} frame file(s) missing; evaluating {} of {} videos", missing.len(), jobs.len(), test.len());
    }

    let mut verdicts = Vec::with_capacity(jobs.len());
    for (row, true_label, video_frames) in jobs {
        let (preds, vote) = classify_video(model, &video_frames, options)?;
        verdicts.push(VideoVerdict {
            video_id: row.video_id.clone(),
            device_id: row.device_id.clone(),
            true_label,
            scenario: row.scenario,
            version: row.version,
            frame_indices: video_frames.iter().map(|f| f.0).collect(),
            frame_labels: preds.iter().map(|p| p.label).collect(),
            frame_probs: preds.into_iter().map(|p| p.probs).collect(),
            tally: vote.tally,
            predicted: vote.label,
            tie: vote.tie,
        });
    }
    Ok(EvaluationReport::from_verdicts(options.voting, model.classes().to_vec(), verdicts))
}

/// Pixels per matrix cell in heatmaps.
pub const HEATMAP_CELL: usize = 16;

/// Binary PGM of a matrix with entries in `[0, 1]`, white for 1.
pub fn heatmap_pgm(matrix: &[Vec<f64>], cell: usize) -> Vec<u8> {
    let rows = matrix.len();
    let cols = matrix.first().map_or(0, Vec::len);
    let (w, h) = (cols * cell, rows * cell);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    for row in matrix {
        let line: Vec<u8> = row
            .iter()
            .flat_map(|&v| std::iter::repeat_n((v.clamp(0.0, 1.0) * 255.0).round() as u8, cell))
            .collect();
        for _ in 0..cell {
            out.extend_from_slice(&line);
        }
    }
    out
}

fn confusion_csv(slice: &SliceResult, classes: &[String]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["true\\predicted".to_string()];
    header.extend(classes.iter().cloned());
    w.write_record(&header)?;
    for (name, row) in classes.iter().zip(&slice.confusion) {
        let mut record = vec![name.clone()];
        record.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&record)?;
    }
    w.into_inner().map_err(|e| Error::Dataset(format!("writing confusion matrix: {e}")))
}

/// Writes `report.json`, `verdicts.csv`, and `confusion_<slice>.csv` plus
/// `confusion_<slice>.pgm` for every slice. Returns the files written.
pub fn emit_report(report: &EvaluationReport, out_dir: &Path) -> Result<Vec<PathBuf>> {
    create_dir_all(out_dir)?;
    let mut written = Vec::new();
    let mut put = |name: String, bytes: Vec<u8>| -> Result<()> {
        let path = out_dir.join(name);
        write_file(&path, &bytes)?;
        written.push(path);
        Ok(())
    };

    let mut json = serde_json::to_vec_pretty(report)?;
    json.push(b'\n');
    put("report.json".into(), json)?;

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["video_id", "device_id", "scenario", "version", "predicted", "correct", "tie", "frames"])?;
    for v in &report.verdicts {
        w.write_record([
            v.video_id.clone(),
            v.device_id.clone(),
            v.scenario.to_string(),
            v.version.to_string(),
            report.classes[v.predicted].clone(),
            v.correct().to_string(),
            v.tie.to_string(),
            v.frame_labels.len().to_string(),
        ])?;
    }
    put("verdicts.csv".into(), w.into_inner().map_err(|e| Error::Dataset(e.to_string()))?)?;

    for slice in &report.slices {
        put(format!("confusion_{}.csv", slice.name), confusion_csv(slice, &report.classes)?)?;
        put(format!("confusion_{}.pgm", slice.name), heatmap_pgm(&slice.confusion, HEATMAP_CELL))?;
    }
    Ok(written)
}

pub fn load_report(path: &Path) -> Result<EvaluationReport> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Text summary of the headline accuracies.
pub fn summary_lines(report: &EvaluationReport) -> Vec<String> {
    let mut lines = vec![format!(
        "frames {} frame-accuracy {:.4} voting {}",
        report.frames_evaluated, report.frame_accuracy, report.voting
    )];
    for s in &report.slices {
        let acc = s.accuracy.map_or("n/a".to_string(), |a| format!("{a:.4}"));
        lines.push(format!("{:<16} videos {:>5} correct {:>5} accuracy {acc}", s.name, s.videos, s.correct));
    }
    lines
}
