use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

pub const INPUT_CHANNELS: usize = 3;
pub const INPUT_SIZE: usize = 64;
/// Pixels enter both branches as `(v - INPUT_MEAN) / INPUT_STD`.
pub const INPUT_MEAN: f64 = 0.5;
pub const INPUT_STD: f64 = 0.25;

/// Where in the RGB branch the saliency map modulates the features.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FusionPoint {
    /// conv2 output, 32x16x16.
    BeforePool2,
    /// after the second pooling, 32x8x8.
    AfterPool2,
    /// conv3 output, 48x8x8.
    AfterConv3,
    /// conv4 output, 48x8x8.
    AfterConv4,
}

impl FusionPoint {
    pub const ALL: [FusionPoint; 4] = [
        FusionPoint::BeforePool2,
        FusionPoint::AfterPool2,
        FusionPoint::AfterConv3,
        FusionPoint::AfterConv4,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FusionPoint::BeforePool2 => "before-pool2",
            FusionPoint::AfterPool2 => "after-pool2",
            FusionPoint::AfterConv3 => "after-conv3",
            FusionPoint::AfterConv4 => "after-conv4",
        }
    }

    /// Human label used in ablation summaries.
    pub fn label(self) -> &'static str {
        match self {
            FusionPoint::BeforePool2 => "Before Pool-2",
            FusionPoint::AfterPool2 => "After Pool-2",
            FusionPoint::AfterConv3 => "After Conv-3",
            FusionPoint::AfterConv4 => "After Conv-4",
        }
    }

    /// Spatial side of the fused feature map.
    pub fn resolution(self) -> usize {
        match self {
            FusionPoint::BeforePool2 => 16,
            _ => 8,
        }
    }

    /// Channels of the fused feature map.
    pub fn channels(self) -> usize {
        match self {
            FusionPoint::BeforePool2 | FusionPoint::AfterPool2 => 32,
            FusionPoint::AfterConv3 | FusionPoint::AfterConv4 => 48,
        }
    }
}

impl fmt::Display for FusionPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FusionPoint {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FusionPoint::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown fusion point `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ModelConfig {
    pub num_classes: usize,
    /// Number of convolutions in the saliency branch, 1 to 4.
    pub saliency_depth: usize,
    pub fusion_point: FusionPoint,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_classes: 8,
            saliency_depth: 4,
            fusion_point: FusionPoint::BeforePool2,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        if !(1..=SALIENCY_LAYERS.len()).contains(&self.saliency_depth) {
            return Err(Error::Config(format!(
                "saliency depth must be in 1..=4, got {}",
                self.saliency_depth
            )));
        }
        Ok(())
    }

    /// Side length of the saliency branch output before resampling.
    pub fn saliency_native_resolution(&self) -> usize {
        SALIENCY_LAYERS[..self.saliency_depth]
            .iter()
            .fold(INPUT_SIZE, |n, l| (n + 2 * l.pad - l.kernel) / l.stride + 1)
    }

    pub fn saliency_channels(&self) -> usize {
        SALIENCY_LAYERS[self.saliency_depth - 1].out_channels
    }
}

/// One convolution of the reference topology.
#[derive(Clone, Copy, Debug)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

const fn conv(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, pad: usize) -> ConvSpec {
    ConvSpec {
        in_channels,
        out_channels,
        kernel,
        stride,
        pad,
    }
}

pub const RGB_LAYERS: [ConvSpec; 4] = [
    conv(3, 16, 5, 2, 2),
    conv(16, 32, 3, 1, 1),
    conv(32, 48, 3, 1, 1),
    conv(48, 48, 3, 1, 1),
];

pub const SALIENCY_LAYERS: [ConvSpec; 4] = [
    conv(3, 16, 5, 2, 2),
    conv(16, 24, 3, 2, 1),
    conv(24, 32, 3, 2, 1),
    conv(32, 32, 3, 1, 1),
];

/// Flattened conv4 output after the last pooling: 48 x 4 x 4.
pub const HEAD_INPUTS: usize = 48 * 4 * 4;
