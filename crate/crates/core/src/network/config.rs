use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::substrate::conv::conv_out_len;
use crate::substrate::InitScheme;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Paper,
    Tiny,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Preset::Paper),
            "tiny" => Ok(Preset::Tiny),
            other => Err(Error::InvalidConfig(format!("unknown preset `{other}`"))),
        }
    }
}

impl std::fmt::Display for Preset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Preset::Paper => "paper",
            Preset::Tiny => "tiny",
        })
    }
}

/// Architecture sizes of one model instance.
///
/// `channels` lists the output width of the five backbone stages: the
/// stem (ConvB1), the modality-specific residual stage (ConvB2), the shared
/// stage (ConvB3) and the two ReID stages (ConvB4, ConvB5).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleConfig {
    pub input_hw: (usize, usize),
    pub channels: [usize; 5],
    /// Residual blocks per stage for ConvB2..ConvB5.
    pub blocks: [usize; 4],
    pub pose_channels: usize,
    pub convb6_width: usize,
    pub stripe_count: usize,
    pub fc_dim: usize,
    pub keypoint_count: usize,
    pub num_identities: usize,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    pub init: InitSchemeName,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitSchemeName {
    He,
    Xavier,
}

impl From<InitSchemeName> for InitScheme {
    fn from(s: InitSchemeName) -> Self {
        match s {
            InitSchemeName::He => InitScheme::He,
            InitSchemeName::Xavier => InitScheme::Xavier,
        }
    }
}

impl ScaleConfig {
    pub fn preset(preset: Preset, num_identities: usize) -> Self {
        match preset {
            Preset::Paper => ScaleConfig {
                input_hw: (288, 144),
                channels: [64, 256, 512, 1024, 2048],
                blocks: [3, 4, 6, 3],
                pose_channels: 128,
                convb6_width: 512,
                stripe_count: 6,
                fc_dim: 512,
                keypoint_count: 16,
                num_identities,
                bn_eps: 1e-5,
                bn_momentum: 0.1,
                init: InitSchemeName::He,
            },
            Preset::Tiny => ScaleConfig {
                input_hw: (96, 48),
                channels: [8, 32, 64, 128, 256],
                blocks: [1, 1, 1, 1],
                pose_channels: 16,
                convb6_width: 64,
                stripe_count: 3,
                fc_dim: 64,
                keypoint_count: 8,
                num_identities,
                bn_eps: 1e-5,
                bn_momentum: 0.1,
                init: InitSchemeName::He,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.input_hw;
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if h % 8 != 0 || w % 8 != 0 {
            return bad(format!("input {h}x{w} must be divisible by 8 so heatmaps are exactly input/4"));
        }
        if self.channels.iter().any(|&c| c == 0) || self.blocks.iter().any(|&b| b == 0) {
            return bad("channel widths and block counts must be positive".into());
        }
        if self.channels[1..].iter().any(|&c| c % 4 != 0) {
            return bad("residual stage widths must be divisible by 4 (bottleneck expansion)".into());
        }
        if self.stripe_count == 0 {
            return bad("stripe count must be positive".into());
        }
        let (fh, _) = self.reid_hw();
        if fh < self.stripe_count {
            return bad(format!(
                "feature map height {fh} cannot hold {} stripes",
                self.stripe_count
            ));
        }
        if self.num_identities < 1 || self.fc_dim == 0 || self.keypoint_count == 0 || self.pose_channels == 0 {
            return bad("identities, fc_dim, keypoints and pose channels must be positive".into());
        }
        Ok(())
    }

    /// Spatial size after the stride-2 stem convolution and the stride-2 reduction.
    pub fn stem_hw(&self) -> (usize, usize) {
        let f = |x| conv_out_len(conv_out_len(x, 7, 2, 3), 3, 2, 1);
        (f(self.input_hw.0), f(self.input_hw.1))
    }

    /// Spatial size of the modality-shared features (stride 8).
    pub fn shared_hw(&self) -> (usize, usize) {
        let (h, w) = self.stem_hw();
        (conv_out_len(h, 3, 2, 1), conv_out_len(w, 3, 2, 1))
    }

    /// Heatmap resolution (stride 4).
    pub fn heatmap_hw(&self) -> (usize, usize) {
        let (h, w) = self.shared_hw();
        (2 * h, 2 * w)
    }

    /// Spatial size of the final ReID and pose feature maps (stride 16).
    pub fn reid_hw(&self) -> (usize, usize) {
        let (h, w) = self.shared_hw();
        (conv_out_len(h, 3, 2, 1), conv_out_len(w, 3, 2, 1))
    }

    pub fn shared_channels(&self) -> usize {
        self.channels[2]
    }

    pub fn reid_channels(&self) -> usize {
        self.channels[4]
    }

    /// Row ranges of the horizontal stripes; heights differ by at most one.
    pub fn stripe_bounds(&self) -> Vec<(usize, usize)> {
        stripe_bounds(self.reid_hw().0, self.stripe_count)
    }
}

/// Splits `height` rows into `parts` contiguous bands.
pub fn stripe_bounds(height: usize, parts: usize) -> Vec<(usize, usize)> {
    (0..parts)
        .map(|i| (i * height / parts, (i + 1) * height / parts))
        .collect()
}
