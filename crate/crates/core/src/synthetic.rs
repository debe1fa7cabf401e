//! Synthetic videos whose class identity is a fixed noise pattern.
//!
//! Every class `c` owns a zero-mean, unit-variance pattern `P_c`. A frame is
//! `clip(0.5 + scene + σ_n·P_c)` (or `clip((0.5 + scene)·(1 + σ_n·P_c))` in
//! multiplicative mode) where `scene` is a low-pass filtered random field of
//! standard deviation `σ_s`, drawn afresh for every frame. Frames are stored
//! as 8-bit PNG.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{CatalogEntry, VideoCatalog};
use crate::frames::{frame_file_name, write_frame_manifest, FrameRecord, Scenario, Version, FRAME_MANIFEST};
use crate::util::{create_dir_all, derive_seed, write_file};
use crate::{Error, Result};

/// Largest allowed normalized dot product between two class patterns.
pub const MAX_PATTERN_OVERLAP: f64 = 0.1;
const MAX_PATTERN_DRAWS: u64 = 100;
const CHANNELS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    /// Pattern amplitude σ_n; zero leaves no class signal.
    pub noise: f64,
    /// Scene amplitude σ_s.
    pub scene: f64,
    /// Standard deviation, in pixels, of the Gaussian that smooths the scene.
    pub scene_blur: f64,
    pub videos_per_class: usize,
    pub frames_per_video: usize,
    pub seed: u64,
    pub multiplicative: bool,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_classes: 4,
            height: 64,
            width: 64,
            noise: 0.02,
            scene: 0.2,
            scene_blur: 2.0,
            videos_per_class: 12,
            frames_per_video: 9,
            seed: 7,
            multiplicative: false,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.num_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.height < 16 || self.width < 16 {
            return bad(format!("frames must be at least 16x16, got {}x{}", self.height, self.width));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad(format!("noise amplitude {} must be finite and non-negative", self.noise));
        }
        if !(self.scene > 0.0 && self.scene.is_finite()) {
            return bad(format!("scene amplitude {} must be positive", self.scene));
        }
        if !(self.scene_blur > 0.0 && self.scene_blur.is_finite()) {
            return bad(format!("scene blur {} must be positive", self.scene_blur));
        }
        if self.videos_per_class == 0 || self.frames_per_video == 0 {
            return bad("need at least one video per class and one frame per video".into());
        }
        Ok(())
    }

    pub fn device_id(&self, class: usize) -> String {
        format!("S{class:02}")
    }

    pub fn video_id(&self, class: usize, video: usize) -> String {
        let scenario = Scenario::ALL[video % Scenario::ALL.len()];
        format!("{}_V_{scenario}_{:04}", self.device_id(class), video + 1)
    }

    fn pixels(&self) -> usize {
        CHANNELS * self.height * self.width
    }
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn normalize(v: &mut [f64]) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-12);
    v.iter_mut().for_each(|x| *x = (*x - mean) / std);
}

/// Normalized dot product (cosine) of two vectors.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb).max(1e-300)
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable blur of one `h×w` plane with clamped borders.
fn blur(plane: &[f64], h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(i, k)| k * plane[y * w + (x as isize + i as isize - r).clamp(0, w as isize - 1) as usize])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(i, k)| k * tmp[(y as isize + i as isize - r).clamp(0, h as isize - 1) as usize * w + x])
                .sum();
        }
    }
    out
}

/// Deterministic source of patterns and frames for a spec.
#[derive(Debug, Clone)]
pub struct SyntheticGenerator {
    spec: SyntheticSpec,
    patterns: Vec<Vec<f64>>,
    pattern_redraws: u64,
}

impl SyntheticGenerator {
    pub fn new(spec: SyntheticSpec) -> Result<Self> {
        spec.validate()?;
        let mut patterns: Vec<Vec<f64>> = Vec::with_capacity(spec.num_classes);
        let mut redraws = 0;
        for c in 0..spec.num_classes {
            let mut draw = 0;
            loop {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(spec.seed, 0x5041_5454), (c as u64) << 32 | draw));
                let mut p: Vec<f64> = (0..spec.pixels()).map(|_| standard_normal(&mut rng)).collect();
                normalize(&mut p);
                if patterns.iter().all(|q| cosine(&p, q).abs() < MAX_PATTERN_OVERLAP) {
                    patterns.push(p);
                    break;
                }
                draw += 1;
                redraws += 1;
                if draw == MAX_PATTERN_DRAWS {
                    return Err(Error::InvalidConfig(format!(
                        "could not draw {} near-orthogonal patterns at {}x{}",
                        spec.num_classes, spec.height, spec.width
                    )));
                }
            }
        }
        Ok(SyntheticGenerator {
            spec,
            patterns,
            pattern_redraws: redraws,
        })
    }

    pub fn spec(&self) -> &SyntheticSpec {
        &self.spec
    }

    /// Pattern `P_c`, laid out `[3, H, W]`.
    pub fn pattern(&self, class: usize) -> &[f64] {
        &self.patterns[class]
    }

    pub fn max_pattern_overlap(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.patterns.len() {
            for j in i + 1..self.patterns.len() {
                worst = worst.max(cosine(&self.patterns[i], &self.patterns[j]).abs());
            }
        }
        worst
    }

    /// Unclipped frame values `[3, H, W]`, seeded by class, video and frame.
    pub fn raw_frame(&self, class: usize, video: usize, frame: usize) -> Vec<f64> {
        let s = &self.spec;
        let stream = ((class as u64) << 40) | ((video as u64) << 20) | frame as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(s.seed, 0x5343_454e), stream));
        let plane = s.height * s.width;
        let kernel = gaussian_kernel(s.scene_blur);
        let field = |rng: &mut ChaCha8Rng| {
            let white: Vec<f64> = (0..plane).map(|_| standard_normal(rng)).collect();
            let mut smooth = blur(&white, s.height, s.width, &kernel);
            normalize(&mut smooth);
            smooth
        };
        // A shared luminance field plus weaker per-channel colour.
        let luma = field(&mut rng);
        let mut out = Vec::with_capacity(s.pixels());
        for _ in 0..CHANNELS {
            let chroma = field(&mut rng);
            out.extend(luma.iter().zip(&chroma).map(|(l, c)| s.scene * (0.8 * l + 0.6 * c)));
        }
        let pattern = &self.patterns[class];
        for (v, p) in out.iter_mut().zip(pattern) {
            let base = 0.5 + *v;
            *v = if s.multiplicative {
                base * (1.0 + s.noise * p)
            } else {
                base + s.noise * p
            };
        }
        out
    }

    /// 8-bit frame and the number of clipped samples.
    pub fn render(&self, class: usize, video: usize, frame: usize) -> (RgbImage, usize) {
        let s = &self.spec;
        let raw = self.raw_frame(class, video, frame);
        let plane = s.height * s.width;
        let mut clipped = 0;
        let img = RgbImage::from_fn(s.width as u32, s.height as u32, |x, y| {
            let i = y as usize * s.width + x as usize;
            let mut px = [0u8; 3];
            for (c, out) in px.iter_mut().enumerate() {
                let v = raw[c * plane + i];
                if !(0.0..=1.0).contains(&v) {
                    clipped += 1;
                }
                *out = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
            Rgb(px)
        });
        (img, clipped)
    }
}

/// What [`generate`] wrote.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSummary {
    pub spec: SyntheticSpec,
    pub videos: usize,
    pub frames: usize,
    pub clip_fraction: f64,
    pub max_pattern_overlap: f64,
    pub pattern_redraws: u64,
    pub frames_dir: PathBuf,
    pub catalog: PathBuf,
}

/// Writes `frames/<video>_f<k>.png` with `frames/frames.csv`, a native-only
/// `catalog.csv` (scenarios cycle flat, indoor, outdoor) and `synth.json`.
pub fn generate(spec: &SyntheticSpec, out_dir: &Path) -> Result<SyntheticSummary> {
    let gen = SyntheticGenerator::new(spec.clone())?;
    let frames_dir = out_dir.join("frames");
    create_dir_all(&frames_dir)?;

    let videos: Vec<(usize, usize)> = (0..spec.num_classes)
        .flat_map(|c| (0..spec.videos_per_class).map(move |v| (c, v)))
        .collect();
    let per_video = videos
        .par_iter()
        .map(|&(c, v)| -> Result<(Vec<FrameRecord>, usize)> {
            let video_id = spec.video_id(c, v);
            let mut records = Vec::with_capacity(spec.frames_per_video);
            let mut clipped = 0;
            for k in 0..spec.frames_per_video {
                let (img, n) = gen.render(c, v, k);
                clipped += n;
                let index = k + 1;
                let path = frames_dir.join(frame_file_name(&video_id, index));
                img.save(&path).map_err(|e| Error::Image {
                    path: path.clone(),
                    message: e.to_string(),
                })?;
                records.push(FrameRecord {
                    video_id: video_id.clone(),
                    device_id: spec.device_id(c),
                    scenario: Scenario::ALL[v % Scenario::ALL.len()],
                    version: Version::Native,
                    frame_index: index,
                    path,
                });
            }
            Ok((records, clipped))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut records = Vec::new();
    let mut clipped = 0;
    for (r, n) in per_video {
        records.extend(r);
        clipped += n;
    }
    write_frame_manifest(&frames_dir.join(FRAME_MANIFEST), &records)?;

    let entries = videos
        .iter()
        .map(|&(c, v)| CatalogEntry {
            video_id: spec.video_id(c, v),
            device_id: spec.device_id(c),
            brand: "Synthetic".into(),
            model: format!("pattern-{c:02}"),
            instance: "1".into(),
            scenario: Scenario::ALL[v % Scenario::ALL.len()],
            version: Version::Native,
            parent_id: None,
            path: PathBuf::from("frames"),
            frames: Some(spec.frames_per_video),
            fps: None,
            duration: None,
        })
        .collect();
    let catalog = out_dir.join("catalog.csv");
    VideoCatalog::new(entries)?.write_csv(&catalog)?;

    let total = records.len();
    let summary = SyntheticSummary {
        spec: spec.clone(),
        videos: videos.len(),
        frames: total,
        clip_fraction: clipped as f64 / (total * spec.pixels()) as f64,
        max_pattern_overlap: gen.max_pattern_overlap(),
        pattern_redraws: gen.pattern_redraws,
        frames_dir: PathBuf::from("frames"),
        catalog: PathBuf::from("catalog.csv"),
    };
    let mut json = serde_json::to_vec_pretty(&summary)?;
    json.push(b'\n');
    write_file(&out_dir.join("synth.json"), &json)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            num_classes: 3,
            height: 24,
            width: 20,
            videos_per_class: 3,
            frames_per_video: 2,
            ..Default::default()
        }
    }

    #[test]
    fn patterns_are_standardized_and_nearly_orthogonal() {
        let gen = SyntheticGenerator::new(SyntheticSpec::default()).unwrap();
        for c in 0..4 {
            let p = gen.pattern(c);
            let mean = p.iter().sum::<f64>() / p.len() as f64;
            let var = p.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / p.len() as f64;
            assert!(mean.abs() < 1e-9 && (var - 1.0).abs() < 1e-9);
        }
        assert!(gen.max_pattern_overlap() < MAX_PATTERN_OVERLAP);
    }

    #[test]
    fn rejects_bad_specs() {
        for spec in [
            SyntheticSpec { num_classes: 1, ..Default::default() },
            SyntheticSpec { height: 8, ..Default::default() },
            SyntheticSpec { scene: 0.0, ..Default::default() },
            SyntheticSpec { noise: -0.1, ..Default::default() },
            SyntheticSpec { frames_per_video: 0, ..Default::default() },
        ] {
            assert!(spec.validate().is_err(), "{spec:?}");
        }
        assert!(SyntheticSpec { noise: 0.0, ..Default::default() }.validate().is_ok());
    }

    #[test]
    fn class_mean_recovers_pattern() {
        // Averaging many frames cancels the scene and leaves σ_n·P_c.
        let spec = SyntheticSpec { height: 32, width: 32, noise: 0.05, ..Default::default() };
        let gen = SyntheticGenerator::new(spec).unwrap();
        let frames = 400;
        for c in 0..2 {
            let mut acc = vec![0.0; 3 * 32 * 32];
            for k in 0..frames {
                for (a, v) in acc.iter_mut().zip(gen.raw_frame(c, k % 3, k)) {
                    *a += v / frames as f64;
                }
            }
            let global = acc.iter().sum::<f64>() / acc.len() as f64;
            let diff: Vec<f64> = acc.iter().map(|m| m - global).collect();
            let corr = cosine(&diff, gen.pattern(c));
            assert!(corr > 0.9, "class {c}: {corr}");
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let sa = generate(&small(), a.path()).unwrap();
        let sb = generate(&small(), b.path()).unwrap();
        assert_eq!(sa, sb);
        assert_eq!(sa.frames, 18);
        for name in ["catalog.csv", "synth.json", "frames/frames.csv", "frames/S01_V_indoor_0002_f2.png"] {
            assert_eq!(std::fs::read(a.path().join(name)).unwrap(), std::fs::read(b.path().join(name)).unwrap(), "{name}");
        }
        let other = generate(&SyntheticSpec { seed: 8, ..small() }, b.path()).unwrap();
        assert_eq!(other.frames, 18);
        assert_ne!(
            std::fs::read(a.path().join("frames/S01_V_indoor_0002_f2.png")).unwrap(),
            std::fs::read(b.path().join("frames/S01_V_indoor_0002_f2.png")).unwrap()
        );
    }

    #[test]
    fn outputs_form_a_catalog_and_frame_index() {
        let dir = tempfile::tempdir().unwrap();
        let summary = generate(&small(), dir.path()).unwrap();
        assert!((0.0..=1.0).contains(&summary.clip_fraction));
        let catalog = VideoCatalog::read_csv(&dir.path().join("catalog.csv")).unwrap();
        assert_eq!(catalog.entries().len(), 9);
        let index = crate::frames::index_frames(&dir.path().join("frames")).unwrap();
        assert_eq!(index.len(), 9);
        assert!(index.values().all(|f| f.len() == 2 && f.iter().all(|(_, p)| p.is_file())));
        let img = image::open(&index["S00_V_flat_0001"][0].1).unwrap();
        assert_eq!((img.width(), img.height()), (20, 24));
    }

    #[test]
    fn multiplicative_mode_scales_with_scene() {
        let spec = SyntheticSpec { multiplicative: true, noise: 0.1, ..small() };
        let gen = SyntheticGenerator::new(spec.clone()).unwrap();
        let add = SyntheticGenerator::new(SyntheticSpec { multiplicative: false, ..spec }).unwrap();
        let m = gen.raw_frame(0, 0, 0);
        let a = add.raw_frame(0, 0, 0);
        // Same scene, different noise law.
        assert_ne!(m, a);
        let base: Vec<f64> = a.iter().zip(gen.pattern(0)).map(|(v, p)| v - 0.1 * p).collect();
        for ((mv, b), p) in m.iter().zip(&base).zip(gen.pattern(0)) {
            assert!((mv - b * (1.0 + 0.1 * p)).abs() < 1e-12);
        }
    }
}
