//! Equally spaced frame sampling and extraction.
//!
//! For a video of `F` frames, `K` frames are taken at the 1-based indices
//! `floor(i·F/K)` for `i = 1..=K`, so 200 frames out of 1000 are
//! `5, 10, …, 1000`. No frame is rejected for its content.
//!
//! Decoding is delegated to a [`FrameDecoder`]: [`FfmpegDecoder`] drives the
//! `ffmpeg`/`ffprobe` binaries, [`DirectoryDecoder`] reads a directory of
//! already extracted images. Frames are stored as lossless PNG.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::util::create_dir_all;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    Flat,
    Indoor,
    Outdoor,
}

impl Scenario {
    pub const ALL: [Scenario; 3] = [Scenario::Flat, Scenario::Indoor, Scenario::Outdoor];

    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::Flat => "flat",
            Scenario::Indoor => "indoor",
            Scenario::Outdoor => "outdoor",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Version {
    Native,
    Whatsapp,
    Youtube,
}

impl Version {
    pub const ALL: [Version; 3] = [Version::Native, Version::Whatsapp, Version::Youtube];

    pub fn as_str(self) -> &'static str {
        match self {
            Version::Native => "native",
            Version::Whatsapp => "whatsapp",
            Version::Youtube => "youtube",
        }
    }
}

macro_rules! vocabulary {
    ($ty:ty, $what:literal) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                let lower = s.to_ascii_lowercase();
                Self::ALL
                    .into_iter()
                    .find(|v| v.as_str() == lower)
                    .ok_or_else(|| Error::InvalidArgument(format!(concat!("unknown ", $what, " `{}`"), s)))
            }
        }
    };
}

vocabulary!(Scenario, "scenario");
vocabulary!(Version, "version");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoDescriptor {
    pub video_id: String,
    pub path: PathBuf,
    pub device_id: String,
    pub scenario: Scenario,
    pub version: Version,
    /// Frame count when known up front; otherwise asked of the decoder.
    #[serde(default)]
    pub total_frames: Option<usize>,
    #[serde(default)]
    pub fps: Option<f64>,
    #[serde(default)]
    pub duration: Option<f64>,
}

/// The frames sampled from one video, in increasing index order.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSet {
    pub video_id: String,
    pub frames: Vec<(usize, PathBuf)>,
}

/// 1-based indices `floor(i·F/K)` for `i = 1..=K`, clamped to at least 1.
///
/// `K > F` is an error unless `allow_repeats`, in which case the same formula
/// yields repeated indices.
pub fn sample_indices(total_frames: usize, count: usize, allow_repeats: bool) -> Result<Vec<usize>> {
    if total_frames == 0 || count == 0 {
        return Err(Error::InvalidArgument(format!(
            "need at least one frame and one sample, got F={total_frames} K={count}"
        )));
    }
    if count > total_frames && !allow_repeats {
        return Err(Error::InvalidArgument(format!(
            "cannot sample {count} distinct frames from {total_frames} (use --allow-repeats)"
        )));
    }
    Ok((1..=count)
        .map(|i| ((i as u128 * total_frames as u128) / count as u128).max(1) as usize)
        .collect())
}

pub fn frame_file_name(video_id: &str, index: usize) -> String {
    format!("{video_id}_f{index}.png")
}

/// Source of decoded frames for a video.
pub trait FrameDecoder: Sync {
    fn frame_count(&self, video: &Path) -> Result<usize>;

    /// Writes frame `indices[i]` (1-based) of `video` to `outputs[i]` as PNG.
    fn extract(&self, video: &Path, indices: &[usize], outputs: &[PathBuf]) -> Result<()>;
}

/// Frame-accurate decoding through the `ffmpeg` and `ffprobe` executables.
#[derive(Debug, Clone)]
pub struct FfmpegDecoder {
    pub ffmpeg: PathBuf,
    pub ffprobe: PathBuf,
}

impl Default for FfmpegDecoder {
    fn default() -> Self {
        FfmpegDecoder {
            ffmpeg: "ffmpeg".into(),
            ffprobe: "ffprobe".into(),
        }
    }
}

impl FfmpegDecoder {
    pub fn is_available(&self) -> bool {
        Command::new(&self.ffmpeg)
            .arg("-version")
            .output()
            .map(|o| o.status.success())
            .unwrap_or(false)
    }

    fn fail(video: &Path, message: impl Into<String>) -> Error {
        Error::Decoder {
            path: video.to_path_buf(),
            message: message.into(),
        }
    }
}

impl FrameDecoder for FfmpegDecoder {
    fn frame_count(&self, video: &Path) -> Result<usize> {
        let out = Command::new(&self.ffprobe)
            .args(["-v", "error", "-select_streams", "v:0", "-count_packets"])
            .args(["-show_entries", "stream=nb_read_packets", "-of", "csv=p=0"])
            .arg(video)
            .output()
            .map_err(|e| Self::fail(video, format!("cannot run ffprobe: {e}")))?;
        if !out.status.success() {
            return Err(Self::fail(video, String::from_utf8_lossy(&out.stderr).trim().to_string()));
        }
        let text = String::from_utf8_lossy(&out.stdout);
        text.trim()
            .trim_end_matches(',')
            .parse()
            .map_err(|_| Self::fail(video, format!("unexpected ffprobe output `{}`", text.trim())))
    }

    fn extract(&self, video: &Path, indices: &[usize], outputs: &[PathBuf]) -> Result<()> {
        let mut unique: Vec<usize> = indices.to_vec();
        unique.sort_unstable();
        unique.dedup();
        let parent = outputs
            .first()
            .and_then(|p| p.parent())
            .ok_or_else(|| Self::fail(video, "no output paths"))?;
        let stem = video.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let tmp = parent.join(format!(".extract-{stem}"));
        create_dir_all(&tmp)?;

        // ffmpeg counts frames from 0.
        let select = unique
            .iter()
            .map(|i| format!("eq(n\\,{})", i - 1))
            .collect::<Vec<_>>()
            .join("+");
        let out = Command::new(&self.ffmpeg)
            .args(["-v", "error", "-y", "-i"])
            .arg(video)
            .args(["-vf", &format!("select='{select}'"), "-vsync", "0", "-start_number", "0"])
            .arg(tmp.join("%06d.png"))
            .output()
            .map_err(|e| Self::fail(video, format!("cannot run ffmpeg: {e}")))?;
        if !out.status.success() {
            let _ = std::fs::remove_dir_all(&tmp);
            return Err(Self::fail(video, String::from_utf8_lossy(&out.stderr).trim().to_string()));
        }
        for (index, output) in indices.iter().zip(outputs) {
            let pos = unique.binary_search(index).expect("index in unique set");
            let produced = tmp.join(format!("{pos:06}.png"));
            if !produced.is_file() {
                let _ = std::fs::remove_dir_all(&tmp);
                return Err(Self::fail(video, format!("frame {index} was not produced")));
            }
            std::fs::copy(&produced, output).map_err(|e| Error::io(output, e))?;
        }
        let _ = std::fs::remove_dir_all(&tmp);
        Ok(())
    }
}

/// Treats a directory of images as a video: the `i`-th file in name order is
/// frame `i`.
#[derive(Debug, Clone, Default)]
pub struct DirectoryDecoder;

impl DirectoryDecoder {
    fn listing(dir: &Path) -> Result<Vec<PathBuf>> {
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.is_file()
                    && p.extension()
                        .and_then(|e| e.to_str())
                        .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg" | "bmp" | "ppm" | "tif" | "tiff"))
                        .unwrap_or(false)
            })
            .collect();
        files.sort();
        Ok(files)
    }
}

impl FrameDecoder for DirectoryDecoder {
    fn frame_count(&self, video: &Path) -> Result<usize> {
        Ok(Self::listing(video)?.len())
    }

    fn extract(&self, video: &Path, indices: &[usize], outputs: &[PathBuf]) -> Result<()> {
        let files = Self::listing(video)?;
        for (&index, output) in indices.iter().zip(outputs) {
            let src = files.get(index.wrapping_sub(1)).ok_or_else(|| Error::Decoder {
                path: video.to_path_buf(),
                message: format!("frame {index} out of range ({} files)", files.len()),
            })?;
            let is_png = src
                .extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| e.eq_ignore_ascii_case("png"));
            if is_png {
                std::fs::copy(src, output).map_err(|e| Error::io(output, e))?;
            } else {
                let img = image::open(src).map_err(|e| Error::Image {
                    path: src.clone(),
                    message: e.to_string(),
                })?;
                img.to_rgb8().save(output).map_err(|e| Error::Image {
                    path: output.clone(),
                    message: e.to_string(),
                })?;
            }
        }
        Ok(())
    }
}

/// Chooses [`DirectoryDecoder`] for directories and ffmpeg otherwise.
#[derive(Debug, Clone, Default)]
pub struct AutoDecoder {
    pub ffmpeg: FfmpegDecoder,
}

impl FrameDecoder for AutoDecoder {
    fn frame_count(&self, video: &Path) -> Result<usize> {
        if video.is_dir() {
            DirectoryDecoder.frame_count(video)
        } else {
            self.ffmpeg.frame_count(video)
        }
    }

    fn extract(&self, video: &Path, indices: &[usize], outputs: &[PathBuf]) -> Result<()> {
        if video.is_dir() {
            DirectoryDecoder.extract(video, indices, outputs)
        } else {
            self.ffmpeg.extract(video, indices, outputs)
        }
    }
}

fn is_valid_image(path: &Path) -> bool {
    path.is_file() && image::image_dimensions(path).is_ok()
}

/// Samples `count` frames of `video` into `out_dir`. Frames that already
/// exist as readable images are not decoded again.
pub fn extract_frames(
    video: &VideoDescriptor,
    count: usize,
    out_dir: &Path,
    decoder: &dyn FrameDecoder,
    allow_repeats: bool,
) -> Result<FrameSet> {
    create_dir_all(out_dir)?;
    let total = match video.total_frames {
        Some(f) => f,
        None => decoder.frame_count(&video.path)?,
    };
    let indices = sample_indices(total, count, allow_repeats)?;
    let paths: Vec<PathBuf> = indices
        .iter()
        .map(|&i| out_dir.join(frame_file_name(&video.video_id, i)))
        .collect();

    let (todo_idx, todo_paths): (Vec<usize>, Vec<PathBuf>) = indices
        .iter()
        .zip(&paths)
        .filter(|(_, p)| !is_valid_image(p))
        .map(|(&i, p)| (i, p.clone()))
        .unzip();
    if !todo_idx.is_empty() {
        decoder.extract(&video.path, &todo_idx, &todo_paths)?;
    }
    Ok(FrameSet {
        video_id: video.video_id.clone(),
        frames: indices.into_iter().zip(paths).collect(),
    })
}

/// One row of the frame manifest CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub video_id: String,
    pub device_id: String,
    pub scenario: Scenario,
    pub version: Version,
    pub frame_index: usize,
    pub path: PathBuf,
}

impl FrameRecord {
    pub fn for_frames(video: &VideoDescriptor, set: &FrameSet) -> Vec<FrameRecord> {
        set.frames
            .iter()
            .map(|(index, path)| FrameRecord {
                video_id: video.video_id.clone(),
                device_id: video.device_id.clone(),
                scenario: video.scenario,
                version: video.version,
                frame_index: *index,
                path: path.clone(),
            })
            .collect()
    }
}

/// Writes the manifest; paths under the manifest's directory are stored
/// relative to it.
pub fn write_frame_manifest(path: &Path, records: &[FrameRecord]) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new(""));
    let mut w = csv::Writer::from_path(path).map_err(|e| wrap_csv(path, e))?;
    for r in records {
        let mut row = r.clone();
        if let Ok(rel) = r.path.strip_prefix(base) {
            row.path = rel.to_path_buf();
        }
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a manifest, resolving relative paths against its directory.
pub fn read_frame_manifest(path: &Path) -> Result<Vec<FrameRecord>> {
    let base = path.parent().unwrap_or(Path::new(""));
    let mut r = csv::Reader::from_path(path).map_err(|e| wrap_csv(path, e))?;
    let mut out = Vec::new();
    for row in r.deserialize() {
        let mut rec: FrameRecord = row?;
        if rec.path.is_relative() {
            rec.path = base.join(&rec.path);
        }
        out.push(rec);
    }
    Ok(out)
}

/// Name of the manifest `sample` writes into its output directory.
pub const FRAME_MANIFEST: &str = "frames.csv";

/// Sampled frames per video id, each list in increasing index order.
pub type FrameIndex = BTreeMap<String, Vec<(usize, PathBuf)>>;

/// Indexes a frames directory, from its `frames.csv` when present and
/// otherwise from file names of the form `<video-id>_f<index>.png`.
pub fn index_frames(dir: &Path) -> Result<FrameIndex> {
    let mut index = FrameIndex::new();
    let manifest = dir.join(FRAME_MANIFEST);
    if manifest.is_file() {
        for r in read_frame_manifest(&manifest)? {
            index.entry(r.video_id).or_default().push((r.frame_index, r.path));
        }
    } else {
        let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        for entry in entries {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("png") {
                continue;
            }
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
            let parsed = stem
                .rsplit_once("_f")
                .and_then(|(id, n)| n.parse::<usize>().ok().map(|n| (id.to_string(), n)));
            if let Some((id, n)) = parsed {
                index.entry(id).or_default().push((n, path));
            }
        }
    }
    for frames in index.values_mut() {
        frames.sort();
    }
    Ok(index)
}

pub(crate) fn wrap_csv(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Dataset(format!("{}: {other:?}", path.display())),
    }
}

#[cfg(test)]
mod tests {
    use image::{Rgb, RgbImage};
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn divisible_examples() {
        let a = sample_indices(1000, 200, false).unwrap();
        assert_eq!(a, (1..=200).map(|i| 5 * i).collect::<Vec<_>>());
        let b = sample_indices(600, 200, false).unwrap();
        assert_eq!(b, (1..=200).map(|i| 3 * i).collect::<Vec<_>>());
    }

    #[test]
    fn identity_and_uneven() {
        assert_eq!(sample_indices(9, 9, false).unwrap(), (1..=9).collect::<Vec<_>>());
        assert_eq!(sample_indices(7, 3, false).unwrap(), vec![2, 4, 7]);
        assert_eq!(sample_indices(57, 1, false).unwrap(), vec![57]);
    }

    #[test]
    fn too_many_frames_needs_repeats() {
        assert!(sample_indices(3, 5, false).is_err());
        assert_eq!(sample_indices(3, 5, true).unwrap(), vec![1, 1, 1, 2, 3]);
        assert!(sample_indices(0, 1, true).is_err());
    }

    proptest! {
        #[test]
        fn spacing_and_coverage(f in 1usize..5000, k_frac in 0.0f64..1.0) {
            let k = ((f as f64 * k_frac) as usize).max(1);
            let idx = sample_indices(f, k, false).unwrap();
            prop_assert_eq!(idx.len(), k);
            prop_assert!(idx[0] >= 1);
            prop_assert_eq!(*idx.last().unwrap(), f);
            prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
            let gaps: Vec<usize> = idx.windows(2).map(|w| w[1] - w[0]).collect();
            if let (Some(min), Some(max)) = (gaps.iter().min(), gaps.iter().max()) {
                prop_assert!(max - min <= 1);
            }
        }
    }

    fn frame_dir(dir: &Path, n: usize) {
        std::fs::create_dir_all(dir).unwrap();
        for i in 0..n {
            let img = RgbImage::from_fn(16, 16, |x, y| Rgb([(i % 256) as u8, x as u8, y as u8]));
            img.save(dir.join(format!("{i:05}.png"))).unwrap();
        }
    }

    fn descriptor(path: PathBuf) -> VideoDescriptor {
        VideoDescriptor {
            video_id: "D01_V_flat_0001".into(),
            path,
            device_id: "D01".into(),
            scenario: Scenario::Flat,
            version: Version::Native,
            total_frames: None,
            fps: None,
            duration: None,
        }
    }

    #[test]
    fn extracts_from_directory_and_is_idempotent() {
        let tmp = tempfile::tempdir().unwrap();
        let src = tmp.path().join("video");
        frame_dir(&src, 20);
        let out = tmp.path().join("frames");
        let video = descriptor(src);
        let set = extract_frames(&video, 4, &out, &DirectoryDecoder, false).unwrap();
        let names: Vec<String> = set.frames.iter().map(|(_, p)| p.file_name().unwrap().to_string_lossy().into_owned()).collect();
        assert_eq!(names, ["D01_V_flat_0001_f5.png", "D01_V_flat_0001_f10.png", "D01_V_flat_0001_f15.png", "D01_V_flat_0001_f20.png"]);
        // Frame 5 is the fifth file, whose red channel encodes 4.
        let img = image::open(&set.frames[0].1).unwrap().to_rgb8();
        assert_eq!(img.get_pixel(0, 0)[0], 4);

        let before: Vec<_> = set.frames.iter().map(|(_, p)| std::fs::metadata(p).unwrap().modified().unwrap()).collect();
        std::thread::sleep(std::time::Duration::from_millis(20));
        let again = extract_frames(&video, 4, &out, &DirectoryDecoder, false).unwrap();
        assert_eq!(again, set);
        let after: Vec<_> = again.frames.iter().map(|(_, p)| std::fs::metadata(p).unwrap().modified().unwrap()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn single_frame_is_the_last() {
        let tmp = tempfile::tempdir().unwrap();
        let src = tmp.path().join("v");
        frame_dir(&src, 7);
        let set = extract_frames(&descriptor(src), 1, &tmp.path().join("o"), &DirectoryDecoder, false).unwrap();
        assert_eq!(set.frames[0].0, 7);
    }

    #[test]
    fn manifest_round_trip_with_relative_paths() {
        let tmp = tempfile::tempdir().unwrap();
        let rec = FrameRecord {
            video_id: "v1".into(),
            device_id: "D01".into(),
            scenario: Scenario::Indoor,
            version: Version::Youtube,
            frame_index: 5,
            path: tmp.path().join("v1_f5.png"),
        };
        let manifest = tmp.path().join("frames.csv");
        write_frame_manifest(&manifest, std::slice::from_ref(&rec)).unwrap();
        let text = std::fs::read_to_string(&manifest).unwrap();
        assert_eq!(text, "video_id,device_id,scenario,version,frame_index,path\nv1,D01,indoor,youtube,5,v1_f5.png\n");
        assert_eq!(read_frame_manifest(&manifest).unwrap(), vec![rec]);
    }

    #[test]
    fn index_from_names_and_from_manifest() {
        let tmp = tempfile::tempdir().unwrap();
        for name in ["v_a_f10.png", "v_a_f5.png", "w_f1.png", "notes.txt"] {
            std::fs::write(tmp.path().join(name), b"").unwrap();
        }
        let index = index_frames(tmp.path()).unwrap();
        assert_eq!(index.len(), 2);
        assert_eq!(index["v_a"].iter().map(|f| f.0).collect::<Vec<_>>(), vec![5, 10]);

        let rec = FrameRecord {
            video_id: "only".into(),
            device_id: "D".into(),
            scenario: Scenario::Flat,
            version: Version::Native,
            frame_index: 3,
            path: tmp.path().join("w_f1.png"),
        };
        write_frame_manifest(&tmp.path().join(FRAME_MANIFEST), &[rec]).unwrap();
        let index = index_frames(tmp.path()).unwrap();
        assert_eq!(index.keys().collect::<Vec<_>>(), vec!["only"]);
    }

    #[test]
    fn ffmpeg_extracts_the_requested_frames() {
        let dec = FfmpegDecoder::default();
        if !dec.is_available() {
            eprintln!("ffmpeg not installed; skipping");
            return;
        }
        let tmp = tempfile::tempdir().unwrap();
        let video = tmp.path().join("clip.mkv");
        let status = Command::new("ffmpeg")
            .args(["-v", "error", "-f", "lavfi", "-i", "testsrc=size=64x48:rate=10:duration=3", "-c:v", "ffv1"])
            .arg(&video)
            .status()
            .unwrap();
        assert!(status.success());
        assert_eq!(dec.frame_count(&video).unwrap(), 30);
        let set = extract_frames(&descriptor(video), 3, &tmp.path().join("out"), &dec, false).unwrap();
        assert_eq!(set.frames.iter().map(|f| f.0).collect::<Vec<_>>(), vec![10, 20, 30]);
        assert!(set.frames.iter().all(|(_, p)| image::image_dimensions(p).unwrap() == (64, 48)));
    }
}
