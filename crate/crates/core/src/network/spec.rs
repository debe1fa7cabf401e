use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::tensor::{pool_extent, ActivationKind, ConvSpec, MaxPool};
use crate::util::{read_file, write_file};
use crate::{Error, Result};

pub const SPEC_VERSION: u32 = 1;

/// Declarative description of a network. Serialised as TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub spec_version: u32,
    /// `[channels, height, width]` of one input frame.
    pub input_shape: [usize; 3],
    pub constrained_layer: ConstrainedLayerSpec,
    pub blocks: Vec<BlockSpec>,
    pub fc_sizes: Vec<usize>,
    #[serde(default = "default_activation")]
    pub fc_activation: ActivationKind,
    pub num_classes: usize,
}

/// The first layer. When `enabled` is false the same geometry is used for a
/// plain, freely learned convolution with bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstrainedLayerSpec {
    pub enabled: bool,
    pub filters: usize,
    pub kernel_size: usize,
    #[serde(default = "one")]
    pub stride: usize,
    #[serde(default)]
    pub padding: usize,
    /// Single-kernel filters for one-channel input.
    #[serde(default)]
    pub grayscale: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub out_channels: usize,
    pub kernel_size: usize,
    #[serde(default = "one")]
    pub stride: usize,
    #[serde(default)]
    pub padding: usize,
    #[serde(default = "default_activation")]
    pub activation: ActivationKind,
    #[serde(default)]
    pub pool: Option<MaxPool>,
}

fn one() -> usize {
    1
}

fn default_activation() -> ActivationKind {
    ActivationKind::Tanh
}

/// One row of the shape audit.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerShape {
    pub layer: String,
    pub output: Vec<usize>,
}

impl Default for ArchitectureSpec {
    /// Full-frame network: 3×480×800 input, constrained 3×5×5 bank, three
    /// tanh/max-pool conv blocks, two 1024-unit dense layers, 28 classes.
    fn default() -> Self {
        let pool = Some(MaxPool { window: 3, stride: 2 });
        let block = |out_channels, kernel_size, stride| BlockSpec {
            out_channels,
            kernel_size,
            stride,
            padding: 0,
            activation: ActivationKind::Tanh,
            pool,
        };
        ArchitectureSpec {
            spec_version: SPEC_VERSION,
            input_shape: [3, 480, 800],
            constrained_layer: ConstrainedLayerSpec {
                enabled: true,
                filters: 3,
                kernel_size: 5,
                stride: 1,
                padding: 0,
                grayscale: false,
            },
            blocks: vec![block(96, 7, 2), block(64, 5, 1), block(64, 5, 1)],
            fc_sizes: vec![1024, 1024],
            fc_activation: ActivationKind::Tanh,
            num_classes: 28,
        }
    }
}

impl ArchitectureSpec {
    /// A small network of the same shape for frames of `height × width`,
    /// used for the synthetic experiments.
    pub fn reduced(height: usize, width: usize, num_classes: usize) -> Self {
        let pool = Some(MaxPool { window: 3, stride: 2 });
        ArchitectureSpec {
            input_shape: [3, height, width],
            blocks: vec![
                BlockSpec {
                    out_channels: 16,
                    kernel_size: 5,
                    stride: 2,
                    padding: 0,
                    activation: ActivationKind::Tanh,
                    pool,
                },
                // Without a second pool the dense layer still sees where in
                // the frame a feature fired.
                BlockSpec {
                    out_channels: 16,
                    kernel_size: 3,
                    stride: 1,
                    padding: 0,
                    activation: ActivationKind::Tanh,
                    pool: None,
                },
            ],
            fc_sizes: vec![64],
            num_classes,
            ..Default::default()
        }
    }

    pub fn without_constraint(mut self) -> Self {
        self.constrained_layer.enabled = false;
        self
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let spec: ArchitectureSpec = toml::from_str(text).map_err(|e| Error::SpecFile(e.to_string()))?;
        if spec.spec_version != SPEC_VERSION {
            return Err(Error::SpecFile(format!(
                "unsupported spec_version {} (expected {SPEC_VERSION})",
                spec.spec_version
            )));
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::SpecFile(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let text = String::from_utf8(bytes).map_err(|e| Error::SpecFile(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_toml_string()?.as_bytes())
    }

    pub fn first_layer_conv(&self) -> ConvSpec {
        let c = &self.constrained_layer;
        ConvSpec::square(self.input_shape[0], c.filters, c.kernel_size, c.stride, c.padding)
    }

    pub fn validate(&self) -> Result<()> {
        self.shape_trace(1).map(|_| ())
    }

    /// Output shape of every layer for a batch of `batch` frames; fails on
    /// the first inconsistency.
    pub fn shape_trace(&self, batch: usize) -> Result<Vec<LayerShape>> {
        if self.num_classes < 2 {
            return Err(Error::InvalidConfig(format!("num_classes must be >= 2, got {}", self.num_classes)));
        }
        let [c, mut h, mut w] = self.input_shape;
        let cl = &self.constrained_layer;
        if cl.enabled {
            let expected = if cl.grayscale { 1 } else { 3 };
            if c != expected {
                return Err(Error::InvalidConfig(format!(
                    "constrained layer needs {expected}-channel input, input_shape has {c}{}",
                    if c == 1 { "; set grayscale = true" } else { "" }
                )));
            }
            if cl.kernel_size.is_multiple_of(2) {
                return Err(Error::InvalidConfig(format!(
                    "constrained kernel size must be odd, got {}",
                    cl.kernel_size
                )));
            }
        }
        let mut trace = Vec::new();
        let first = self.first_layer_conv();
        (h, w) = first.output_extent(h, w)?;
        let mut channels = first.out_channels;
        let name = if cl.enabled { "constrained" } else { "conv0" };
        trace.push(LayerShape {
            layer: name.into(),
            output: vec![batch, channels, h, w],
        });
        for (i, block) in self.blocks.iter().enumerate() {
            let conv = ConvSpec::square(channels, block.out_channels, block.kernel_size, block.stride, block.padding);
            (h, w) = conv.output_extent(h, w)?;
            channels = block.out_channels;
            trace.push(LayerShape {
                layer: format!("conv{}+{}", i + 1, block.activation),
                output: vec![batch, channels, h, w],
            });
            if let Some(pool) = block.pool {
                (h, w) = pool_extent(pool, h, w)?;
                trace.push(LayerShape {
                    layer: format!("pool{}", i + 1),
                    output: vec![batch, channels, h, w],
                });
            }
        }
        let mut features = channels * h * w;
        trace.push(LayerShape {
            layer: "flatten".into(),
            output: vec![batch, features],
        });
        for (i, &units) in self.fc_sizes.iter().enumerate() {
            if units == 0 {
                return Err(Error::InvalidConfig(format!("fc layer {i} has zero units")));
            }
            features = units;
            trace.push(LayerShape {
                layer: format!("fc{}+{}", i + 1, self.fc_activation),
                output: vec![batch, features],
            });
        }
        trace.push(LayerShape {
            layer: "logits".into(),
            output: vec![batch, self.num_classes],
        });
        Ok(trace)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_shapes() {
        let trace = ArchitectureSpec::default().shape_trace(128).unwrap();
        let find = |name: &str| trace.iter().find(|l| l.layer == name).unwrap().output.clone();
        assert_eq!(find("constrained"), vec![128, 3, 476, 796]);
        assert_eq!(find("pool1"), vec![128, 96, 117, 197]);
        assert_eq!(find("pool3"), vec![128, 64, 25, 45]);
        assert_eq!(find("flatten"), vec![128, 72000]);
        assert_eq!(trace.last().unwrap().output, vec![128, 28]);
    }

    #[test]
    fn toml_round_trip() {
        let spec = ArchitectureSpec::reduced(64, 64, 4);
        let text = spec.to_toml_string().unwrap();
        assert!(text.contains("spec_version = 1"));
        assert_eq!(ArchitectureSpec::from_toml_str(&text).unwrap(), spec);
    }

    #[test]
    fn rejects_wrong_version_and_bad_shapes() {
        let mut spec = ArchitectureSpec::reduced(64, 64, 4);
        spec.spec_version = 9;
        let text = spec.to_toml_string().unwrap();
        assert!(ArchitectureSpec::from_toml_str(&text).is_err());

        let mut tiny = ArchitectureSpec::reduced(16, 16, 4);
        tiny.blocks[0].kernel_size = 15;
        assert!(tiny.validate().is_err());

        let mut one_class = ArchitectureSpec::reduced(64, 64, 4);
        one_class.num_classes = 1;
        assert!(one_class.validate().is_err());
    }
}
