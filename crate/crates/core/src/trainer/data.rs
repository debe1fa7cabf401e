use std::path::PathBuf;

use crate::network::{load_frame, ResizePolicy};
use crate::tensor::Tensor;
use crate::Result;

/// Labelled frames for training, addressed by index.
pub trait FrameSource: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn label(&self, index: usize) -> usize;

    /// Frame `index` as a `[C, H, W]` tensor matching the network input.
    fn load(&self, index: usize) -> Result<Tensor<f32>>;

    /// Files that a training run would need but that do not exist.
    fn missing(&self) -> Vec<PathBuf> {
        Vec::new()
    }
}

/// Frames already decoded into memory.
#[derive(Debug, Clone, Default)]
pub struct InMemoryFrames {
    frames: Vec<Tensor<f32>>,
    labels: Vec<usize>,
}

impl InMemoryFrames {
    pub fn new(frames: Vec<Tensor<f32>>, labels: Vec<usize>) -> Self {
        assert_eq!(frames.len(), labels.len(), "one label per frame");
        InMemoryFrames { frames, labels }
    }

    pub fn push(&mut self, frame: Tensor<f32>, label: usize) {
        self.frames.push(frame);
        self.labels.push(label);
    }
}

impl FrameSource for InMemoryFrames {
    fn len(&self) -> usize {
        self.frames.len()
    }

    fn label(&self, index: usize) -> usize {
        self.labels[index]
    }

    fn load(&self, index: usize) -> Result<Tensor<f32>> {
        Ok(self.frames[index].clone())
    }
}

/// Frame image files, decoded and preprocessed on demand.
#[derive(Debug, Clone)]
pub struct FileFrames {
    entries: Vec<(PathBuf, usize)>,
    height: usize,
    width: usize,
    policy: ResizePolicy,
}

impl FileFrames {
    pub fn new(entries: Vec<(PathBuf, usize)>, height: usize, width: usize, policy: ResizePolicy) -> Self {
        FileFrames {
            entries,
            height,
            width,
            policy,
        }
    }

    pub fn entries(&self) -> &[(PathBuf, usize)] {
        &self.entries
    }
}

impl FrameSource for FileFrames {
    fn len(&self) -> usize {
        self.entries.len()
    }

    fn label(&self, index: usize) -> usize {
        self.entries[index].1
    }

    fn load(&self, index: usize) -> Result<Tensor<f32>> {
        load_frame(&self.entries[index].0, self.height, self.width, self.policy)
    }

    fn missing(&self) -> Vec<PathBuf> {
        self.entries
            .iter()
            .filter(|(p, _)| !p.is_file())
            .map(|(p, _)| p.clone())
            .collect()
    }
}
